//! Benchmark configuration. One JSON document with the sections `data`,
//! `model`, `unlearn`, `attack`, `tune` and `report`; every field has a
//! default, so `{}` is a valid config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{LiraConfig, UpdateLeakConfig};
use crate::data::{load_cifar10, Dataset, SyntheticSpec};
use crate::error::{BenchError, Result};
use crate::nn::{ArchFamily, ArchitectureSpec};
use crate::store::{build_split_plan, sha256_hex, SplitPlan};
use crate::unlearn::{AlgorithmId, HyperParams};
use crate::zoo::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Store root; the `BENCH_STORE` env var takes precedence.
    pub store: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub unlearn: UnlearnConfig,
    pub attack: AttackConfig,
    pub tune: TuneConfig,
    pub report: ReportConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            store: PathBuf::from("bench-store"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            unlearn: UnlearnConfig::default(),
            attack: AttackConfig::default(),
            tune: TuneConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// CIFAR-10 binary release read from `dir`.
    Cifar10 {
        dir: PathBuf,
        #[serde(default = "cifar_train")]
        train_limit: usize,
        #[serde(default = "cifar_test")]
        test_limit: usize,
    },
}

fn cifar_train() -> usize {
    50_000
}

fn cifar_test() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Carved out of the training pool.
    pub val_size: usize,
    /// Test examples used; `None` takes the whole test pool.
    pub test_size: Option<usize>,
    pub forget_fraction: f64,
    pub iterations: usize,
    pub plan_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic(SyntheticSpec::default()),
            val_size: 1000,
            test_size: None,
            forget_fraction: 0.01,
            iterations: 10,
            plan_seed: 17,
        }
    }
}

impl DataConfig {
    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.source {
            DataSource::Synthetic(spec) => spec.generate(),
            DataSource::Cifar10 {
                dir,
                train_limit,
                test_limit,
            } => load_cifar10(dir, *train_limit, *test_limit),
        }
    }

    pub fn build_plan(&self, dataset: &Dataset) -> Result<SplitPlan> {
        use crate::data::ExampleSource;
        let pool = dataset.train_pool();
        if self.val_size >= pool {
            return Err(BenchError::BadSizes(format!(
                "validation size {} leaves no training data in a pool of {pool}",
                self.val_size
            )));
        }
        let test = self.test_size.unwrap_or(dataset.test_pool()).min(dataset.test_pool());
        build_split_plan(
            dataset.dataset_id(),
            pool - self.val_size,
            self.val_size,
            test,
            self.forget_fraction,
            self.iterations,
            self.plan_seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: ArchFamily,
    /// `None` uses the family default.
    pub width: Option<usize>,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: ArchFamily::SmallCnn,
            width: Some(16),
            train: TrainConfig {
                epochs: 12,
                ..TrainConfig::default()
            },
        }
    }
}

impl ModelConfig {
    pub fn arch(&self, dataset: &Dataset) -> ArchitectureSpec {
        use crate::data::ExampleSource;
        let spec = ArchitectureSpec::new(self.family, dataset.shape(), dataset.classes());
        match self.width {
            Some(w) => spec.with_width(w),
            None => spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub algorithm: AlgorithmId,
    /// Missing keys take the algorithm defaults.
    pub hyperparams: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            algorithm: AlgorithmId::Finetune,
            hyperparams: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    /// Hyperparameters for `algorithm`. Configured values apply only when
    /// `algorithm` is the configured one.
    pub fn hyperparams_for(&self, algorithm: AlgorithmId) -> Result<HyperParams> {
        if algorithm == self.algorithm {
            HyperParams::validated(algorithm, &self.hyperparams)
        } else {
            Ok(HyperParams::defaults(algorithm))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Attack every `every` iterations during iterative runs; 0 disables.
    pub every: usize,
    pub shadows: usize,
    /// Epochs for shadow models; `None` uses the base training config.
    pub shadow_epochs: Option<usize>,
    pub pairs: usize,
    /// Held-out nonmember queries; `None` matches the forget-set size.
    pub nonmembers: Option<usize>,
    pub lr_folds: usize,
    /// `None` uses `1 / |D_train|`.
    pub delta: Option<f64>,
    /// `None` uses point error rates instead of Clopper–Pearson bounds.
    pub confidence: Option<f64>,
    pub harm_band: f64,
    pub seed: u64,
    pub lira: LiraConfig,
    pub update_leak: UpdateLeakConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            every: 5,
            shadows: 16,
            shadow_epochs: None,
            pairs: 32,
            nonmembers: None,
            lr_folds: 5,
            delta: None,
            confidence: Some(crate::metrics::DEFAULT_CONFIDENCE),
            harm_band: 0.02,
            seed: 1,
            lira: LiraConfig::default(),
            update_leak: UpdateLeakConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub trials: usize,
    /// Weight of the `|0.5 − MIA accuracy|` term.
    pub weight: f64,
    pub seed: u64,
    /// `[low, high]` per hyperparameter; missing keys use the schema range.
    pub ranges: BTreeMap<String, [f64; 2]>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            trials: 100,
            weight: 1.0,
            seed: 0,
            ranges: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub out_dir: PathBuf,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            out_dir: PathBuf::from("reports"),
        }
    }
}

impl BenchConfig {
    /// Reads `path` (or starts from `{}` when `None`) and applies
    /// `section.key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| BenchError::io(p, e))?;
                serde_json::from_slice(&bytes).map_err(|e| BenchError::json(p, e))?
            }
            None => serde_json::json!({}),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        serde_json::from_value(value).map_err(|e| BenchError::Config(e.to_string()))
    }

    /// Hash of the canonical JSON form, without the store and report
    /// locations, so a relocated store yields the same run ids.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["store"] = serde_json::Value::Null;
        v["report"]["out_dir"] = serde_json::Value::Null;
        sha256_hex(&serde_json::to_vec(&v).expect("config serializes"))
    }
}

/// Sets a dotted path such as `attack.shadows=4`. The value is parsed as JSON
/// and falls back to a plain string.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| BenchError::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(BenchError::Config(format!("override path {path:?} has an empty key")));
    }
    let mut cursor = root;
    for key in &keys[..keys.len() - 1] {
        let map = cursor
            .as_object_mut()
            .ok_or_else(|| BenchError::Config(format!("override {path:?} descends into a non-object")))?;
        cursor = map.entry(key.to_string()).or_insert_with(|| serde_json::json!({}));
    }
    cursor
        .as_object_mut()
        .ok_or_else(|| BenchError::Config(format!("override {path:?} descends into a non-object")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Short description of the config sections, printed with usage errors.
pub fn config_help() -> String {
    let defaults = serde_json::to_string_pretty(&BenchConfig::default()).expect("config serializes");
    format!(
        "Config: one JSON file with sections data, model, unlearn, attack, tune, report.\n\
         Any field can be overridden with --set section.key=value.\n\
         Defaults:\n{defaults}\n"
    )
}
