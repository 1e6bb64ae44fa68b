//! On-disk experiment store: split plans, content-addressed weight blobs,
//! checkpoint records and append-only run manifests.
//!
//! Layout under the store root:
//!
//! ```text
//! plans/<plan_id>.json
//! blobs/<hh>/<rest of sha256>        raw weight blobs
//! checkpoints/<checkpoint_id>.json   CheckpointRef records
//! runs/<run_id>/manifest.json        RunManifest
//! refs/<name>                        checkpoint id behind a named ref
//! .writer.lock                       held while writing
//! ```

mod manifest;
mod plan;

pub use manifest::{now_unix, ManifestIteration, RunManifest, MANIFEST_SCHEMA_VERSION};
pub use plan::{build_split_plan, forget_set_size, IndexSet, SplitPlan, PLAN_SCHEMA_VERSION};

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BenchError, Result};

/// Env var that overrides the configured store root.
pub const STORE_ENV: &str = "BENCH_STORE";

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// How the weights were produced, e.g. `"train"`, `"init"`, `"unlearn:ssd"`.
    pub recipe: String,
    /// Hash of the index set the weights were fit on.
    pub data_hash: String,
    pub epochs: usize,
    pub seed: u64,
    pub parent: Option<String>,
    /// Training config or hyperparameters, recorded verbatim.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// A registered checkpoint.
///
/// `weights_hash` addresses the blob; `checkpoint_id` hashes the blob hash
/// together with the provenance, so bit-identical weights with different
/// histories (e.g. the identity unlearner's output) stay distinct records
/// while sharing one blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub checkpoint_id: String,
    pub weights_hash: String,
    pub architecture: String,
    pub provenance: Provenance,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

/// Exclusive writer lock on the store; released on drop.
pub struct WriterLock {
    _file: File,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["plans", "blobs", "checkpoints", "runs", "refs"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| BenchError::io(&dir, e))?;
        }
        Ok(Store { root })
    }

    /// Opens `BENCH_STORE` when set, otherwise `default_root`.
    pub fn open_from_env(default_root: impl Into<PathBuf>) -> Result<Self> {
        match std::env::var_os(STORE_ENV) {
            Some(root) if !root.is_empty() => Store::open(PathBuf::from(root)),
            _ => Store::open(default_root),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn lock(&self) -> Result<WriterLock> {
        let path = self.root.join(".writer.lock");
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| BenchError::io(&path, e))?;
        file.lock().map_err(|e| BenchError::io(&path, e))?;
        Ok(WriterLock { _file: file })
    }

    fn blob_path(&self, weights_hash: &str) -> PathBuf {
        self.root
            .join("blobs")
            .join(&weights_hash[..2])
            .join(&weights_hash[2..])
    }

    fn checkpoint_path(&self, id: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{id}.json"))
    }

    pub fn register_checkpoint(
        &self,
        blob: &[u8],
        architecture: &str,
        provenance: Provenance,
    ) -> Result<CheckpointRef> {
        if provenance.recipe.is_empty() || provenance.data_hash.is_empty() {
            return Err(BenchError::Config("checkpoint provenance is incomplete".into()));
        }
        if let Some(parent) = &provenance.parent {
            if !self.checkpoint_path(parent).exists() {
                return Err(BenchError::NotFound(parent.clone()));
            }
        }
        let weights_hash = sha256_hex(blob);
        let record_key = serde_json::to_vec(&(&weights_hash, architecture, &provenance))
            .expect("provenance serializes");
        let checkpoint_id = sha256_hex(&record_key);
        let reference = CheckpointRef {
            checkpoint_id,
            weights_hash,
            architecture: architecture.to_string(),
            provenance,
        };

        let _guard = self.lock()?;
        let blob_path = self.blob_path(&reference.weights_hash);
        if !blob_path.exists() {
            write_atomic(&blob_path, blob)?;
        }
        let ref_path = self.checkpoint_path(&reference.checkpoint_id);
        if !ref_path.exists() {
            write_json_atomic(&ref_path, &reference)?;
        }
        Ok(reference)
    }

    pub fn checkpoint_ref(&self, id: &str) -> Result<CheckpointRef> {
        let path = self.checkpoint_path(id);
        if !path.exists() {
            return Err(BenchError::NotFound(id.to_string()));
        }
        read_json(&path)
    }

    pub fn has_checkpoint(&self, id: &str) -> bool {
        self.checkpoint_path(id).exists()
    }

    /// Loads the weight blob, verifying its content hash.
    pub fn load_checkpoint(&self, id: &str) -> Result<(CheckpointRef, Vec<u8>)> {
        let reference = self.checkpoint_ref(id)?;
        let path = self.blob_path(&reference.weights_hash);
        let blob = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(BenchError::NotFound(reference.weights_hash.clone()))
            }
            Err(e) => return Err(BenchError::io(&path, e)),
        };
        let actual = sha256_hex(&blob);
        if actual != reference.weights_hash {
            return Err(BenchError::HashMismatch {
                id: id.to_string(),
                actual,
            });
        }
        Ok((reference, blob))
    }

    /// Number of checkpoints on the parent chain starting at `id` (inclusive).
    pub fn chain_length(&self, id: &str) -> Result<usize> {
        let mut len = 0;
        let mut cursor = Some(id.to_string());
        while let Some(current) = cursor {
            len += 1;
            cursor = self.checkpoint_ref(&current)?.provenance.parent;
        }
        Ok(len)
    }

    pub fn save_plan(&self, plan: &SplitPlan) -> Result<String> {
        let id = plan.plan_id();
        let path = self.root.join("plans").join(format!("{id}.json"));
        if !path.exists() {
            let _guard = self.lock()?;
            write_json_atomic(&path, plan)?;
        }
        Ok(id)
    }

    pub fn load_plan(&self, plan_id: &str) -> Result<SplitPlan> {
        let path = self.root.join("plans").join(format!("{plan_id}.json"));
        if !path.exists() {
            return Err(BenchError::NotFound(plan_id.to_string()));
        }
        let plan: SplitPlan = read_json(&path)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    /// Returns `base` if no run with that id exists yet, else `base-2`, `base-3`, ...
    pub fn fresh_run_id(&self, base: &str) -> String {
        if !self.run_dir(base).exists() {
            return base.to_string();
        }
        (2..)
            .map(|n| format!("{base}-{n}"))
            .find(|id| !self.run_dir(id).exists())
            .expect("unbounded search")
    }

    pub fn create_manifest(&self, manifest: &RunManifest) -> Result<()> {
        let _guard = self.lock()?;
        let dir = self.run_dir(&manifest.run_id);
        if dir.join("manifest.json").exists() {
            return Err(BenchError::Config(format!(
                "run {} already exists",
                manifest.run_id
            )));
        }
        if !manifest.iterations.is_empty() {
            return Err(BenchError::Config("new manifests start without iterations".into()));
        }
        write_json_atomic(&dir.join("manifest.json"), manifest)
    }

    pub fn load_manifest(&self, run_id: &str) -> Result<RunManifest> {
        let path = self.run_dir(run_id).join("manifest.json");
        if !path.exists() {
            return Err(BenchError::NotFound(run_id.to_string()));
        }
        read_json(&path)
    }

    /// Appends one iteration to a manifest. Entries are never rewritten.
    pub fn append_iteration(&self, run_id: &str, entry: ManifestIteration) -> Result<RunManifest> {
        let _guard = self.lock()?;
        let mut manifest = self.load_manifest(run_id)?;
        if entry.index != manifest.iterations.len() {
            return Err(BenchError::Config(format!(
                "manifest {run_id} expects iteration {}, got {}",
                manifest.iterations.len(),
                entry.index
            )));
        }
        if !self.has_checkpoint(&entry.checkpoint_id) {
            return Err(BenchError::NotFound(entry.checkpoint_id.clone()));
        }
        manifest.iterations.push(entry);
        write_json_atomic(&self.run_dir(run_id).join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    /// Points the named ref at a checkpoint.
    pub fn set_ref(&self, name: &str, checkpoint_id: &str) -> Result<()> {
        if !self.has_checkpoint(checkpoint_id) {
            return Err(BenchError::NotFound(checkpoint_id.to_string()));
        }
        let _guard = self.lock()?;
        write_atomic(&self.root.join("refs").join(name), checkpoint_id.as_bytes())
    }

    /// Checkpoint id behind a named ref, if set.
    pub fn get_ref(&self, name: &str) -> Result<Option<String>> {
        let path = self.root.join("refs").join(name);
        match fs::read_to_string(&path) {
            Ok(id) => Ok(Some(id.trim().to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(BenchError::io(&path, e)),
        }
    }

    /// Marks a run failed without touching recorded iterations.
    pub fn mark_failed(&self, run_id: &str, reason: &str) -> Result<()> {
        let _guard = self.lock()?;
        let mut manifest = self.load_manifest(run_id)?;
        manifest.failure = Some(reason.to_string());
        write_json_atomic(&self.run_dir(run_id).join("manifest.json"), &manifest)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    let tmp = path.with_extension(format!(
        "tmp{}",
        std::process::id()
    ));
    let mut file = File::create(&tmp).map_err(|e| BenchError::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| BenchError::io(&tmp, e))?;
    file.sync_all().map_err(|e| BenchError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| BenchError::io(path, e))
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| BenchError::json(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| BenchError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| BenchError::json(path, e))
}
