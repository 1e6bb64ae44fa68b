use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// One completed unlearning iteration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestIteration {
    pub index: usize,
    pub checkpoint_id: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub plan_id: String,
    pub algorithm: String,
    pub hyperparams: serde_json::Value,
    #[serde(default)]
    pub base_checkpoint: Option<String>,
    pub created_unix: f64,
    pub iterations: Vec<ManifestIteration>,
    #[serde(default)]
    pub failure: Option<String>,
}

impl RunManifest {
    pub fn new(run_id: &str, plan_id: &str, algorithm: &str, hyperparams: serde_json::Value) -> Self {
        RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            run_id: run_id.to_string(),
            plan_id: plan_id.to_string(),
            algorithm: algorithm.to_string(),
            hyperparams,
            base_checkpoint: None,
            created_unix: now_unix(),
            iterations: Vec::new(),
            failure: None,
        }
    }
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}
