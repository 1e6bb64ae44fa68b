//! Random-search hyperparameter tuning on the first forget set.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::lr_mia;
use crate::data::{ExampleSource, Restricted};
use crate::error::{BenchError, Result};
use crate::store::{IndexSet, SplitPlan};
use crate::unlearn::{run_unlearning, schema, AlgorithmId, HyperParams, ParamSpec, UnlearnRequest};
use crate::zoo::{evaluate_accuracy, extract_scores, Checkpoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSpec {
    pub algorithm: AlgorithmId,
    /// `(low, high)` per searched parameter; unlisted parameters stay at
    /// their defaults.
    pub ranges: BTreeMap<String, (f64, f64)>,
    pub trials: usize,
    /// Weight `w` in `J = val_accuracy − w·|0.5 − MIA accuracy|`.
    pub weight: f64,
    pub lr_folds: usize,
    pub seed: u64,
}

impl TuneSpec {
    /// Every schema parameter over its full range, 100 trials, `w = 1`.
    pub fn new(algorithm: AlgorithmId) -> Self {
        TuneSpec {
            algorithm,
            ranges: schema(algorithm)
                .iter()
                .map(|p| (p.name.to_string(), (p.low, p.high)))
                .collect(),
            trials: 100,
            weight: 1.0,
            lr_folds: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub hyperparams: BTreeMap<String, f64>,
    pub val_accuracy: Option<f64>,
    pub mia_accuracy: Option<f64>,
    pub objective: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: HyperParams,
    pub best_trial: usize,
    pub trials: Vec<TrialRecord>,
}

struct Range {
    spec: ParamSpec,
    low: f64,
    high: f64,
}

fn checked_ranges(spec: &TuneSpec) -> Result<Vec<Range>> {
    let params = schema(spec.algorithm);
    let mut out = Vec::with_capacity(spec.ranges.len());
    for (name, &(low, high)) in &spec.ranges {
        let p = params.iter().find(|p| p.name == name).ok_or_else(|| {
            BenchError::BadHyperparams(format!("{} has no parameter {name:?}", spec.algorithm))
        })?;
        if !low.is_finite() || !high.is_finite() || low > high {
            return Err(BenchError::EmptyRange(name.clone()));
        }
        if p.integer && low.ceil() > high.floor() {
            return Err(BenchError::EmptyRange(name.clone()));
        }
        if low < p.low || high > p.high {
            return Err(BenchError::BadHyperparams(format!(
                "range [{low}, {high}] for {name} leaves [{}, {}]",
                p.low, p.high
            )));
        }
        out.push(Range { spec: *p, low, high });
    }
    Ok(out)
}

fn sample(r: &Range, rng: &mut impl Rng) -> f64 {
    if r.spec.integer {
        return rng.random_range(r.low.ceil() as i64..=r.high.floor() as i64) as f64;
    }
    if r.low == r.high {
        return r.low;
    }
    if r.spec.log && r.low > 0.0 {
        rng.random_range(r.low.ln()..=r.high.ln()).exp().clamp(r.low, r.high)
    } else {
        rng.random_range(r.low..=r.high)
    }
}

/// Random search over `spec.ranges`. Every trial unlearns the first forget
/// set from `base` and is scored on `D_val`:
/// `J = val_accuracy − w·|0.5 − MIA accuracy|`, where the MIA is `lr_mia`
/// with the forget set as members and validation examples as nonmembers.
/// Only `D_train ∪ D_val` is reachable; test examples are never read.
pub fn tune_hyperparams(
    spec: &TuneSpec,
    source: &dyn ExampleSource,
    plan: &SplitPlan,
    base: &Checkpoint,
) -> Result<TuneOutcome> {
    if spec.trials == 0 {
        return Err(BenchError::Config("trial count must be at least 1".into()));
    }
    let ranges = checked_ranges(spec)?;
    let view = Restricted::new(source, plan.train_indices.union(&plan.val_indices));
    let forget = plan.forget_set_for_iteration(0)?;
    let retain = plan.retain_set_for_iteration(0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let val = plan.val_indices.as_slice();
    let nonmembers: IndexSet = index::sample(&mut rng, val.len(), forget.len().min(val.len()))
        .into_iter()
        .map(|k| val[k])
        .collect();

    let mut trials = Vec::with_capacity(spec.trials);
    for t in 0..spec.trials {
        let mut hp = HyperParams::defaults(spec.algorithm).as_map().clone();
        for r in &ranges {
            hp.insert(r.spec.name.to_string(), sample(r, &mut rng));
        }
        let seed = rng.random::<u64>();
        let scored = HyperParams::validated(spec.algorithm, &hp).and_then(|params| {
            let out = run_unlearning(
                &view,
                &UnlearnRequest {
                    base,
                    retain: &retain,
                    forget,
                    algorithm: spec.algorithm,
                    hyperparams: params,
                    seed,
                    rewind_reference: Some(&plan.val_indices),
                },
            )?;
            let net = &out.model.network;
            let val_acc = evaluate_accuracy(net, &view, &plan.val_indices)?.accuracy;
            let m: Vec<f64> = extract_scores(net, &view, forget.as_slice())?.iter().map(|r| r.loss).collect();
            let n: Vec<f64> = extract_scores(net, &view, nonmembers.as_slice())?.iter().map(|r| r.loss).collect();
            let mia = lr_mia(&m, &n, spec.lr_folds)?.accuracy_at(0.5);
            Ok((val_acc, mia))
        });
        trials.push(match scored {
            Ok((val_acc, mia)) => TrialRecord {
                trial: t,
                hyperparams: hp,
                val_accuracy: Some(val_acc),
                mia_accuracy: Some(mia),
                objective: Some(val_acc - spec.weight * (0.5 - mia).abs()),
                error: None,
            },
            Err(e) => TrialRecord {
                trial: t,
                hyperparams: hp,
                val_accuracy: None,
                mia_accuracy: None,
                objective: None,
                error: Some(format!("{}: {e}", e.code())),
            },
        });
    }
    // first trial wins ties
    let best = trials
        .iter()
        .filter_map(|t| t.objective.map(|j| (t.trial, j)))
        .fold(None, |acc: Option<(usize, f64)>, (t, j)| match acc {
            Some((_, bj)) if bj >= j => acc,
            _ => Some((t, j)),
        })
        .ok_or(BenchError::AllTrialsFailed(spec.trials))?
        .0;
    Ok(TuneOutcome {
        best: HyperParams::validated(spec.algorithm, &trials[best].hyperparams)?,
        best_trial: best,
        trials,
    })
}
