//! Subcommand bodies behind the command-line tool. Each returns a JSON
//! summary; `failed` marks outcomes that should exit nonzero.

use std::path::Path;

use serde_json::{json, Value};

use super::{
    emit_report, evaluate_step, load_records, run_iterative, tune_hyperparams, IterativeSpec, ReportInputs,
    RunRecords, StepEvaluation, TuneSpec, Workspace,
};
use crate::attack::parallel_map;
use crate::error::{BenchError, Result};
use crate::store::{read_json, write_atomic, write_json_atomic, IndexSet};
use crate::unlearn::{run_unlearning, AlgorithmId, HyperParams, UnlearnRequest};
use crate::zoo::evaluate_accuracy;

#[derive(Debug)]
pub struct CommandOutput {
    pub value: Value,
    pub failed: bool,
}

impl From<Value> for CommandOutput {
    fn from(value: Value) -> Self {
        CommandOutput { value, failed: false }
    }
}

fn short_hash(ws: &Workspace) -> String {
    ws.config.hash()[..10].to_string()
}

/// Default run id for a subcommand and algorithm under this config.
pub fn default_run_id(ws: &Workspace, kind: &str, algorithm: AlgorithmId) -> String {
    format!("{kind}-{algorithm}-{}", short_hash(ws))
}

pub fn make_plan(ws: &Workspace) -> Result<CommandOutput> {
    Ok(json!({
        "plan_id": ws.plan_id,
        "dataset": ws.plan.dataset_id,
        "train": ws.plan.train_indices.len(),
        "val": ws.plan.val_indices.len(),
        "test": ws.plan.test_indices.len(),
        "iterations": ws.plan.iterations(),
        "forget_set_size": ws.plan.forget_sequence.first().map_or(0, IndexSet::len),
    })
    .into())
}

pub fn train_base(ws: &Workspace) -> Result<CommandOutput> {
    let base = ws.base()?;
    let test = evaluate_accuracy(&base.network, &ws.dataset, &ws.plan.test_indices)?;
    let train = evaluate_accuracy(&base.network, &ws.dataset, &ws.plan.train_indices)?;
    Ok(json!({
        "checkpoint_id": base.id,
        "architecture": ws.arch.tag(),
        "train_accuracy": train.accuracy,
        "test_accuracy": test.accuracy,
    })
    .into())
}

/// One unlearning step on the first forget set.
pub fn unlearn(ws: &Workspace, algorithm: AlgorithmId) -> Result<CommandOutput> {
    let hp = ws.config.unlearn.hyperparams_for(algorithm)?;
    let base = ws.base()?;
    let forget = ws.plan.forget_set_for_iteration(0)?;
    let retain = ws.plan.retain_set_for_iteration(0)?;
    let out = run_unlearning(
        &ws.dataset,
        &UnlearnRequest {
            base: &base,
            retain: &retain,
            forget,
            algorithm,
            hyperparams: hp.clone(),
            seed: ws.config.unlearn.seed,
            rewind_reference: Some(&ws.plan.val_indices),
        },
    )?;
    let mut model = out.model;
    let id = model.register(&ws.store)?.checkpoint_id;
    Ok(json!({
        "algorithm": algorithm,
        "hyperparams": hp,
        "checkpoint_id": id,
        "parent": model.provenance.parent,
        "cost": out.cost,
        "test_accuracy": evaluate_accuracy(&model.network, &ws.dataset, &ws.plan.test_indices)?.accuracy,
        "retain_accuracy": evaluate_accuracy(&model.network, &ws.dataset, &retain)?.accuracy,
        "forget_accuracy": evaluate_accuracy(&model.network, &ws.dataset, forget)?.accuracy,
    })
    .into())
}

/// Trains (or finds cached) the LiRA shadow population and the shadow pairs
/// for `algorithm` over the first forget set plus held-out nonmembers.
pub fn shadows(ws: &Workspace, algorithm: AlgorithmId) -> Result<CommandOutput> {
    let hp = ws.config.unlearn.hyperparams_for(algorithm)?;
    let forget = ws.plan.forget_set_for_iteration(0)?;
    let queries: Vec<u32> = forget.iter().chain(ws.nonmember_queries().iter()).collect();
    let lira = ws.lira_shadows(&queries)?;
    let pairs = ws.shadow_pairs(&queries, algorithm, &hp)?;
    let forgotten = pairs.forgotten.iter().filter(|&&f| f).count();
    Ok(json!({
        "queries": queries.len(),
        "shadows": lira.shadows,
        "pairs": pairs.pairs,
        "algorithm": algorithm,
        "forgotten_fraction": forgotten as f64 / pairs.forgotten.len() as f64,
        "cache": ws.store.root().join("shadows"),
    })
    .into())
}

fn step_path(ws: &Workspace, run_id: &str) -> std::path::PathBuf {
    ws.store.run_dir(run_id).join("step.json")
}

/// Full single-step privacy evaluation, stored under `runs/<run_id>/step.json`.
pub fn attack(ws: &Workspace, algorithm: AlgorithmId, run_id: Option<&str>) -> Result<CommandOutput> {
    let hp = ws.config.unlearn.hyperparams_for(algorithm)?;
    let eval = evaluate_step(ws, algorithm, &hp)?;
    let run_id = run_id.map_or_else(|| default_run_id(ws, "attack", algorithm), str::to_string);
    write_json_atomic(&step_path(ws, &run_id), &eval)?;
    Ok(json!({
        "run_id": run_id,
        "algorithm": algorithm,
        "unlearned_checkpoint": eval.unlearned_checkpoint,
        "report": eval.report,
        "verdict": eval.verdict,
    })
    .into())
}

/// Iterative runs for each algorithm, executed as parallel jobs over the
/// shared plan.
pub fn iterate(ws: &Workspace, algorithms: &[AlgorithmId], iterations: Option<usize>, run_id: Option<&str>) -> Result<CommandOutput> {
    if algorithms.is_empty() {
        return Err(BenchError::Config("no algorithm given".into()));
    }
    let t = iterations.unwrap_or(ws.plan.iterations());
    let base = ws.base()?;
    let attacks = if ws.config.attack.every > 0 {
        Some(ws.iteration_attacks(t)?)
    } else {
        None
    };
    let hps = algorithms
        .iter()
        .map(|&a| ws.config.unlearn.hyperparams_for(a))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = algorithms
        .iter()
        .map(|&a| {
            let wanted = match run_id {
                Some(r) if algorithms.len() == 1 => r.to_string(),
                Some(r) => format!("{r}-{a}"),
                None => default_run_id(ws, "iterate", a),
            };
            ws.store.fresh_run_id(&wanted)
        })
        .collect();
    let outcomes = parallel_map(algorithms.len(), |k| {
        let spec = IterativeSpec {
            algorithm: algorithms[k],
            hyperparams: hps[k].clone(),
            iterations: t,
            attack_every: ws.config.attack.every,
            attacks: attacks.as_ref(),
            rewind_reference: Some(&ws.plan.val_indices),
            seed: ws.config.unlearn.seed,
        };
        run_iterative(&ws.store, &ws.dataset, &ws.plan, &base, &spec, &ids[k])
    });
    let mut runs = Vec::new();
    let mut failed = false;
    for (k, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                failed |= o.failure.is_some();
                runs.push(json!({
                    "run_id": o.run_id,
                    "algorithm": algorithms[k],
                    "iterations": o.records.len(),
                    "test_accuracy": o.records.iter().map(|r| r.test_accuracy).collect::<Vec<_>>(),
                    "failure": o.failure,
                }));
            }
            Err(e) => {
                failed = true;
                runs.push(json!({
                    "run_id": ids[k],
                    "algorithm": algorithms[k],
                    "error": e.code(),
                    "message": e.to_string(),
                }));
            }
        }
    }
    Ok(CommandOutput {
        value: json!({ "runs": runs }),
        failed,
    })
}

/// Random search; writes `best_hyperparams.json` and `trials.csv` under the
/// run directory and, when given, the best config to `out`.
pub fn tune(ws: &Workspace, algorithm: AlgorithmId, trials: Option<usize>, out: Option<&Path>) -> Result<CommandOutput> {
    let mut spec = TuneSpec::new(algorithm);
    for (k, [lo, hi]) in &ws.config.tune.ranges {
        spec.ranges.insert(k.clone(), (*lo, *hi));
    }
    spec.trials = trials.unwrap_or(ws.config.tune.trials);
    spec.weight = ws.config.tune.weight;
    spec.seed = ws.config.tune.seed;
    spec.lr_folds = ws.config.attack.lr_folds;
    let base = ws.base()?;
    let outcome = tune_hyperparams(&spec, &ws.dataset, &ws.plan, &base)?;
    let run_id = ws.store.fresh_run_id(&default_run_id(ws, "tune", algorithm));
    let dir = ws.store.run_dir(&run_id);
    let best = json!({ "algorithm": algorithm, "hyperparams": outcome.best, "trial": outcome.best_trial });
    write_json_atomic(&dir.join("best_hyperparams.json"), &best)?;
    let names: Vec<String> = HyperParams::defaults(algorithm).as_map().keys().cloned().collect();
    let mut table = format!("trial,{}val_accuracy,mia_accuracy,objective,error\n", names.iter().map(|n| format!("{n},")).collect::<String>());
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for t in &outcome.trials {
        let params: String = names.iter().map(|n| format!("{},", t.hyperparams[n])).collect();
        table.push_str(&format!(
            "{},{params}{},{},{},{}\n",
            t.trial,
            opt(t.val_accuracy),
            opt(t.mia_accuracy),
            opt(t.objective),
            t.error.as_deref().unwrap_or("").replace(',', ";")
        ));
    }
    write_atomic(&dir.join("trials.csv"), table.as_bytes())?;
    if let Some(path) = out {
        write_json_atomic(path, &best)?;
    }
    Ok(json!({
        "run_id": run_id,
        "best": best,
        "trials": outcome.trials.len(),
        "failed_trials": outcome.trials.iter().filter(|t| t.error.is_some()).count(),
    })
    .into())
}

/// Gathers stored iterative runs and step evaluations and emits the report.
/// Without explicit run ids, every algorithm's default runs under this
/// config are used when present.
pub fn report(ws: &Workspace, run_ids: &[String], report_id: Option<&str>) -> Result<CommandOutput> {
    let mut inputs = ReportInputs::default();
    let mut add = |run_id: &str, explicit: bool| -> Result<()> {
        let step = step_path(ws, run_id);
        if step.exists() {
            inputs.steps.push(read_json::<StepEvaluation>(&step)?);
            return Ok(());
        }
        match ws.store.load_manifest(run_id) {
            Ok(m) => {
                let algorithm: AlgorithmId = m.algorithm.parse()?;
                inputs.runs.push(RunRecords {
                    run_id: run_id.to_string(),
                    algorithm,
                    records: load_records(&ws.store, run_id)?,
                    failure: m.failure,
                });
                Ok(())
            }
            Err(e) if explicit => Err(e),
            Err(_) => Ok(()),
        }
    };
    if run_ids.is_empty() {
        for &a in AlgorithmId::ALL {
            add(&default_run_id(ws, "iterate", a), false)?;
        }
        for &a in AlgorithmId::ALL {
            add(&default_run_id(ws, "attack", a), false)?;
        }
    } else {
        for id in run_ids {
            add(id, true)?;
        }
    }
    let report_id = report_id.map_or_else(|| format!("report-{}", short_hash(ws)), str::to_string);
    let bundle = emit_report(&inputs, &ws.config.report.out_dir, &report_id)?;
    Ok(serde_json::to_value(bundle).expect("bundle serializes").into())
}
