//! Per-algorithm hyperparameter schemas and validated parameter records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AlgorithmId;
use crate::error::{BenchError, Result};

/// One tunable knob: its default and the inclusive range the tuner searches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: &'static str,
    pub default: f64,
    pub low: f64,
    pub high: f64,
    /// Sample on a log scale.
    pub log: bool,
    pub integer: bool,
}

const fn real(name: &'static str, default: f64, low: f64, high: f64, log: bool) -> ParamSpec {
    ParamSpec {
        name,
        default,
        low,
        high,
        log,
        integer: false,
    }
}

const fn int(name: &'static str, default: f64, low: f64, high: f64) -> ParamSpec {
    ParamSpec {
        name,
        default,
        low,
        high,
        log: false,
        integer: true,
    }
}

const FINETUNE: &[ParamSpec] = &[int("epochs", 3.0, 0.0, 10.0), real("lr", 0.01, 1e-4, 0.1, true)];

const RANDLABEL: &[ParamSpec] = &[int("epochs", 2.0, 1.0, 10.0), real("lr", 0.01, 1e-4, 0.1, true)];

const BADTEACH: &[ParamSpec] = &[
    real("temperature", 1.0, 0.5, 8.0, true),
    int("epochs", 1.0, 1.0, 5.0),
    real("lr", 0.01, 1e-4, 0.1, true),
    real("retain_fraction", 0.3, 0.0, 1.0, false),
];

const SCRUB: &[ParamSpec] = &[
    int("msteps", 2.0, 0.0, 10.0),
    int("epochs", 4.0, 1.0, 10.0),
    real("alpha", 1.0, 0.0, 10.0, false),
    real("gamma", 1.0, 0.0, 10.0, false),
    real("temperature", 4.0, 0.5, 8.0, true),
    real("lr", 0.005, 1e-4, 0.1, true),
];

const SSD: &[ParamSpec] = &[
    real("alpha_ssd", 10.0, 0.1, 100.0, true),
    real("lambda_ssd", 1.0, 0.1, 10.0, true),
];

const SSD_FT: &[ParamSpec] = &[
    real("alpha_ssd", 10.0, 0.1, 100.0, true),
    real("lambda_ssd", 1.0, 0.1, 10.0, true),
    int("epochs", 1.0, 0.0, 10.0),
    real("lr", 0.01, 1e-4, 0.1, true),
];

/// The declared knobs of `algo`. Identity and Retrain take none; retrain
/// reuses the base model's training configuration.
pub fn schema(algo: AlgorithmId) -> &'static [ParamSpec] {
    match algo {
        AlgorithmId::Identity | AlgorithmId::Retrain => &[],
        AlgorithmId::Finetune => FINETUNE,
        AlgorithmId::RandLabel => RANDLABEL,
        AlgorithmId::BadTeach => BADTEACH,
        AlgorithmId::ScrubR => SCRUB,
        AlgorithmId::Ssd => SSD,
        AlgorithmId::SsdFt => SSD_FT,
    }
}

/// Machine-readable descriptor of every algorithm's schema.
pub fn hyperparam_descriptor() -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = AlgorithmId::ALL
        .iter()
        .map(|&a| (a.as_str().to_string(), serde_json::to_value(schema(a)).expect("schema serializes")))
        .collect();
    serde_json::Value::Object(map)
}

/// A complete, schema-checked parameter record. Missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HyperParams(BTreeMap<String, f64>);

impl HyperParams {
    pub fn defaults(algo: AlgorithmId) -> Self {
        HyperParams(schema(algo).iter().map(|p| (p.name.to_string(), p.default)).collect())
    }

    /// Rejects unknown keys, non-finite or out-of-range values and
    /// non-integer counts; fills the rest from defaults.
    pub fn validated(algo: AlgorithmId, given: &BTreeMap<String, f64>) -> Result<Self> {
        let specs = schema(algo);
        let mut out = Self::defaults(algo);
        for (key, &value) in given {
            let spec = specs.iter().find(|p| p.name == key).ok_or_else(|| {
                BenchError::BadHyperparams(format!("{} has no parameter {key:?}", algo.as_str()))
            })?;
            if !value.is_finite() || value < spec.low || value > spec.high {
                return Err(BenchError::BadHyperparams(format!(
                    "{key}={value} outside [{}, {}]",
                    spec.low, spec.high
                )));
            }
            if spec.integer && value.fract() != 0.0 {
                return Err(BenchError::BadHyperparams(format!("{key}={value} must be an integer")));
            }
            out.0.insert(key.clone(), value);
        }
        if algo == AlgorithmId::ScrubR && out.get("msteps") > out.get("epochs") {
            return Err(BenchError::BadHyperparams("msteps exceeds epochs".into()));
        }
        Ok(out)
    }

    /// Parses a JSON object of numbers and validates it.
    pub fn from_json(algo: AlgorithmId, value: &serde_json::Value) -> Result<Self> {
        if value.is_null() {
            return Ok(Self::defaults(algo));
        }
        let map: BTreeMap<String, f64> = serde_json::from_value(value.clone())
            .map_err(|e| BenchError::BadHyperparams(format!("expected a map of numbers: {e}")))?;
        Self::validated(algo, &map)
    }

    /// Value of a declared key. Panics on undeclared keys, which validation
    /// rules out for records built through this type.
    pub fn get(&self, key: &str) -> f64 {
        *self.0.get(key).unwrap_or_else(|| panic!("undeclared hyperparameter {key}"))
    }

    pub fn count(&self, key: &str) -> usize {
        self.get(key) as usize
    }

    pub fn as_map(&self) -> &BTreeMap<String, f64> {
        &self.0
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.0).expect("map serializes")
    }
}
