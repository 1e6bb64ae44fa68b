use std::collections::BTreeMap;
use std::sync::Mutex;

use super::commands;
use super::*;
use crate::attack::AttackResult;
use crate::data::SyntheticSpec;
use crate::nn::optim::LrSchedule;
use crate::nn::ArchFamily;

fn tiny_config(store: &std::path::Path) -> BenchConfig {
    let mut cfg = BenchConfig {
        store: store.to_path_buf(),
        ..BenchConfig::default()
    };
    cfg.data.source = DataSource::Synthetic(SyntheticSpec {
        shape: [1, 8, 8],
        train_pool: 600,
        test_pool: 200,
        noise: 0.5,
        max_shift: 0,
        ..SyntheticSpec::default()
    });
    cfg.data.val_size = 100;
    cfg.data.forget_fraction = 0.02;
    cfg.data.iterations = 4;
    cfg.model.family = ArchFamily::Mlp;
    cfg.model.width = Some(32);
    cfg.model.train = TrainConfig {
        epochs: 6,
        batch_size: 64,
        schedule: LrSchedule::Cosine { lr: 0.05 },
        augment: false,
        ..TrainConfig::default()
    };
    cfg.attack.every = 2;
    cfg.attack.shadows = 16;
    cfg.attack.pairs = 16;
    cfg.attack.shadow_epochs = Some(3);
    cfg.tune.trials = 3;
    cfg.report.out_dir = store.join("reports");
    cfg
}

fn workspace(dir: &std::path::Path) -> Workspace {
    let cfg = tiny_config(dir);
    let store = Store::open(dir).unwrap();
    Workspace::with_store(cfg, store).unwrap()
}

fn spec(algorithm: AlgorithmId, iterations: usize) -> IterativeSpec<'static> {
    IterativeSpec {
        algorithm,
        hyperparams: HyperParams::defaults(algorithm),
        iterations,
        attack_every: 0,
        attacks: None,
        rewind_reference: None,
        seed: 3,
    }
}

// config --------------------------------------------------------------------

#[test]
fn empty_config_takes_defaults_and_overrides_apply() {
    assert_eq!(BenchConfig::load(None, &[]).unwrap(), BenchConfig::default());
    let cfg = BenchConfig::load(
        None,
        &[
            "attack.shadows=4".into(),
            "unlearn.algorithm=ssd".into(),
            "model.family=mlp".into(),
            "data.source.kind=synthetic".into(),
        ],
    )
    .unwrap();
    assert_eq!(cfg.attack.shadows, 4);
    assert_eq!(cfg.unlearn.algorithm, AlgorithmId::Ssd);
    assert_eq!(cfg.model.family, ArchFamily::Mlp);
    assert_eq!(BenchConfig::load(None, &["attack.bogus=1".into()]).unwrap_err().code(), "BAD_CONFIG");
    assert_eq!(BenchConfig::load(None, &["no_equals".into()]).unwrap_err().code(), "BAD_CONFIG");
    let mut v = serde_json::json!({"a": 1});
    assert!(apply_override(&mut v, "a.b=2").is_err());
    assert!(config_help().contains("unlearn"));
}

#[test]
fn config_round_trips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let path = dir.path().join("c.json");
    std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    assert_eq!(BenchConfig::load(Some(&path), &[]).unwrap(), cfg);
}

#[test]
fn config_hash_ignores_locations_only() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, cb) = (tiny_config(a.path()), tiny_config(b.path()));
    assert_ne!(ca, cb);
    assert_eq!(ca.hash(), cb.hash());
    let mut cc = tiny_config(a.path());
    cc.attack.seed += 1;
    assert_ne!(ca.hash(), cc.hash());
}

// iterative runs --------------------------------------------------------------

#[test]
fn identity_trajectory_is_exactly_flat() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path());
    let base = ws.base().unwrap();
    let base_acc = evaluate_accuracy(&base.network, &ws.dataset, &ws.plan.test_indices).unwrap().accuracy;
    let out = run_iterative(&ws.store, &ws.dataset, &ws.plan, &base, &spec(AlgorithmId::Identity, 4), "id").unwrap();
    assert_eq!(out.records.len(), 4);
    assert!(out.failure.is_none());
    for (i, r) in out.records.iter().enumerate() {
        assert_eq!(r.iteration, i);
        assert_eq!(r.test_accuracy, base_acc);
        assert_eq!(r.cost.gradient_steps, 0);
        // i + 1 unlearning steps back to the base
        assert_eq!(ws.store.chain_length(&r.checkpoint_id).unwrap(), i + 2);
    }
    let m = ws.store.load_manifest("id").unwrap();
    assert_eq!(m.iterations.len(), 4);
    assert_eq!(m.base_checkpoint, base.id);
    assert_eq!(load_records(&ws.store, "id").unwrap(), out.records);
}

#[test]
fn retrain_chains_have_length_one_and_consume_the_plan_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path());
    let base = ws.base().unwrap();
    let out = run_iterative(&ws.store, &ws.dataset, &ws.plan, &base, &spec(AlgorithmId::Retrain, 2), "rt").unwrap();
    for (i, r) in out.records.iter().enumerate() {
        assert_eq!(ws.store.chain_length(&r.checkpoint_id).unwrap(), 1);
        let ck = ws.store.checkpoint_ref(&r.checkpoint_id).unwrap();
        assert_eq!(ck.provenance.data_hash, ws.plan.retain_set_for_iteration(i).unwrap().content_hash());
    }
    let ft = run_iterative(&ws.store, &ws.dataset, &ws.plan, &base, &spec(AlgorithmId::Finetune, 2), "ft").unwrap();
    for (i, r) in ft.records.iter().enumerate() {
        let ck = ws.store.checkpoint_ref(&r.checkpoint_id).unwrap();
        assert_eq!(
            ck.provenance.config["forget_hash"],
            serde_json::json!(ws.plan.forget_sequence[i].content_hash())
        );
    }
}

#[test]
fn plan_exhaustion_and_mismatched_base() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path());
    let base = ws.base().unwrap();
    let e = run_iterative(&ws.store, &ws.dataset, &ws.plan, &base, &spec(AlgorithmId::Identity, 5), "x").unwrap_err();
    assert_eq!(e.code(), "PLAN_EXHAUSTED");
    let mut other = base.clone();
    other.provenance.data_hash = IndexSet::range(0, 3).content_hash();
    other.id = None;
    let e = run_iterative(&ws.store, &ws.dataset, &ws.plan, &other, &spec(AlgorithmId::Identity, 1), "y").unwrap_err();
    assert_eq!(e.code(), "BAD_CONFIG");
    let mut s = spec(AlgorithmId::Identity, 1);
    s.attack_every = 1;
    assert!(run_iterative(&ws.store, &ws.dataset, &ws.plan, &base, &s, "z").is_err());
}

#[test]
fn failure_mid_run_keeps_earlier_records() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path());
    let base = ws.base().unwrap();
    let mut plan = ws.plan.clone();
    plan.forget_sequence[2] = IndexSet::default();
    let out = run_iterative(&ws.store, &ws.dataset, &plan, &base, &spec(AlgorithmId::Ssd, 4), "broken").unwrap();
    assert_eq!(out.records.len(), 2);
    assert!(out.failure.as_deref().unwrap().contains("EMPTY_DATA"));
    let m = ws.store.load_manifest("broken").unwrap();
    assert_eq!(m.iterations.len(), 2);
    assert!(m.failure.is_some());
    assert_eq!(load_records(&ws.store, "broken").unwrap().len(), 2);
}

#[test]
fn attacks_follow_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path());
    let base = ws.base().unwrap();
    let attacks = ws.iteration_attacks(4).unwrap();
    let mut s = spec(AlgorithmId::Identity, 4);
    s.attack_every = 2;
    s.attacks = Some(&attacks);
    let out = run_iterative(&ws.store, &ws.dataset, &ws.plan, &base, &s, "sched").unwrap();
    let attacked: Vec<usize> = out.records.iter().filter(|r| r.attack.is_some()).map(|r| r.iteration).collect();
    assert_eq!(attacked, vec![0, 2]);
    let report = out.records[0].attack.as_ref().unwrap();
    let names: Vec<&str> = report.attacks.iter().map(|a| a.attack.as_str()).collect();
    assert_eq!(names, vec!["lr_mia", "lira_offline"]);
    assert_eq!(report.attacks[0].queries, 2 * ws.plan.forget_sequence[0].len());
}

// do no harm ------------------------------------------------------------------

fn result(name: &str, scores: Vec<f64>, labels: Vec<u8>) -> AttackResult {
    let q = (0..scores.len() as u32).collect();
    AttackResult::new(name, scores, labels, q).unwrap()
}

#[test]
fn do_no_harm_rules() {
    let labels: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
    let noisy = |shift: f64| -> Vec<f64> {
        (0..200).map(|i| ((i * 37 % 101) as f64) / 101.0 + shift * (i % 2) as f64).collect()
    };
    let base = result("base_model", noisy(0.0), labels.clone());
    let same = do_no_harm_check(&base, &base, &base, 0.02, 1e-3, 0.95).unwrap();
    assert!(!same.harm);
    assert!(!same.benefit);

    let stronger = result("update_leak", noisy(0.5), labels.clone());
    let v = do_no_harm_check(&base, &stronger, &stronger, 0.02, 1e-3, 0.95).unwrap();
    assert!(v.update.auc > v.base.auc + 0.2);
    assert!(v.harm);
    assert!(!v.benefit);

    let weaker_than_retrain = do_no_harm_check(&base, &base, &stronger, 0.02, 1e-3, 0.95).unwrap();
    assert!(weaker_than_retrain.benefit);
    assert!(!weaker_than_retrain.harm);

    let other = AttackResult::new("x", noisy(0.0), labels.clone(), (1..201).collect()).unwrap();
    assert_eq!(do_no_harm_check(&base, &other, &base, 0.02, 1e-3, 0.95).unwrap_err().code(), "QUERY_MISMATCH");
}

#[test]
fn auc_shift_of_point_two_flags_harm() {
    // base AUC 0.5 (all ties), update AUC 0.7: exact rank construction
    let n = 100;
    let labels: Vec<u8> = (0..2 * n).map(|i| (i < n) as u8).collect();
    let base = result("base_model", vec![0.0; 2 * n], labels.clone());
    // members: 40% score 1, 60% score 0; nonmembers all 0 -> AUC = 0.4 + 0.6·0.5 = 0.7
    let update: Vec<f64> = (0..2 * n).map(|i| if i < 40 { 1.0 } else { 0.0 }).collect();
    let update = result("update_leak", update, labels);
    let v = do_no_harm_check(&base, &update, &base, 0.02, 1e-3, 0.95).unwrap();
    assert!((v.update.auc - v.base.auc - 0.2).abs() < 1e-12);
    assert!(v.harm);
}

// tuning ----------------------------------------------------------------------

/// Records every index read through it.
struct Tracking<'a> {
    inner: &'a dyn ExampleSource,
    seen: Mutex<Vec<u32>>,
}

impl ExampleSource for Tracking<'_> {
    fn dataset_id(&self) -> &str {
        self.inner.dataset_id()
    }
    fn shape(&self) -> [usize; 3] {
        self.inner.shape()
    }
    fn classes(&self) -> usize {
        self.inner.classes()
    }
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn label(&self, index: u32) -> usize {
        self.seen.lock().unwrap().push(index);
        self.inner.label(index)
    }
    fn write_features(&self, index: u32, out: &mut [f32]) {
        self.seen.lock().unwrap().push(index);
        self.inner.write_features(index, out)
    }
}

#[test]
fn tuner_never_reads_test_data_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path());
    let base = ws.base().unwrap();
    let tracking = Tracking {
        inner: &ws.dataset,
        seen: Mutex::new(Vec::new()),
    };
    let mut s = TuneSpec::new(AlgorithmId::Finetune);
    s.trials = 3;
    let a = tune_hyperparams(&s, &tracking, &ws.plan, &base).unwrap();
    let seen = tracking.seen.into_inner().unwrap();
    assert!(!seen.is_empty());
    assert!(seen.iter().all(|&i| !ws.plan.test_indices.contains(i)));
    let b = tune_hyperparams(&s, &ws.dataset, &ws.plan, &base).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trials.len(), 3);
    for t in &a.trials {
        let j = t.val_accuracy.unwrap() - (0.5 - t.mia_accuracy.unwrap()).abs();
        assert!((t.objective.unwrap() - j).abs() < 1e-15);
    }
}

#[test]
fn zero_weight_picks_best_validation_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path());
    let base = ws.base().unwrap();
    let mut s = TuneSpec::new(AlgorithmId::Finetune);
    s.trials = 4;
    s.weight = 0.0;
    let out = tune_hyperparams(&s, &ws.dataset, &ws.plan, &base).unwrap();
    let best_val = out.trials.iter().filter_map(|t| t.val_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(out.trials[out.best_trial].val_accuracy, Some(best_val));
    assert_eq!(out.best.as_map(), &out.trials[out.best_trial].hyperparams);
}

#[test]
fn tuner_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path());
    let base = ws.base().unwrap();
    let mut s = TuneSpec::new(AlgorithmId::Ssd);
    s.trials = 0;
    assert!(tune_hyperparams(&s, &ws.dataset, &ws.plan, &base).is_err());
    assert_eq!(TuneSpec::new(AlgorithmId::Ssd).trials, 100);
    let mut s = TuneSpec::new(AlgorithmId::Ssd);
    s.ranges.insert("alpha_ssd".into(), (5.0, 1.0));
    assert_eq!(tune_hyperparams(&s, &ws.dataset, &ws.plan, &base).unwrap_err().code(), "EMPTY_RANGE");
    let mut s = TuneSpec::new(AlgorithmId::Finetune);
    s.ranges.insert("epochs".into(), (1.2, 1.8));
    assert_eq!(tune_hyperparams(&s, &ws.dataset, &ws.plan, &base).unwrap_err().code(), "EMPTY_RANGE");
    let mut s = TuneSpec::new(AlgorithmId::Finetune);
    s.ranges.insert("momentum".into(), (0.1, 0.2));
    assert_eq!(tune_hyperparams(&s, &ws.dataset, &ws.plan, &base).unwrap_err().code(), "BAD_HYPERPARAMS");
    // every sampled configuration violates msteps ≤ epochs
    let mut s = TuneSpec::new(AlgorithmId::ScrubR);
    s.trials = 2;
    s.ranges = BTreeMap::from([("msteps".to_string(), (5.0, 5.0)), ("epochs".to_string(), (1.0, 2.0))]);
    assert_eq!(tune_hyperparams(&s, &ws.dataset, &ws.plan, &base).unwrap_err().code(), "ALL_TRIALS_FAILED");
}

// reports ---------------------------------------------------------------------

fn fake_run(algorithm: AlgorithmId, accs: &[f64]) -> RunRecords {
    RunRecords {
        run_id: format!("run-{algorithm}"),
        algorithm,
        records: accs
            .iter()
            .enumerate()
            .map(|(i, &a)| IterationRecord {
                iteration: i,
                algorithm,
                test_accuracy: a,
                retain_accuracy: a,
                forget_accuracy: a,
                cost: CostReport {
                    wall_seconds: i as f64 * 0.37,
                    gradient_steps: i as u64,
                    ..CostReport::default()
                },
                checkpoint_id: format!("ck{i}"),
                attack: None,
            })
            .collect(),
        failure: None,
    }
}

#[test]
fn report_has_one_series_per_algorithm_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = ReportInputs {
        runs: AlgorithmId::ALL.iter().map(|&a| fake_run(a, &[0.8, 0.7, 0.6])).collect(),
        steps: Vec::new(),
    };
    let bundle = emit_report(&inputs, dir.path(), "r1").unwrap();
    let svg = std::fs::read_to_string(bundle.dir.join("trajectory.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 8);
    for a in AlgorithmId::ALL {
        assert!(svg.contains(&format!(">{a}<")), "{a}");
    }
    let csv = std::fs::read(bundle.dir.join("trajectory.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&csv).lines().count(), 1 + 8 * 3);
    let again = emit_report(&inputs, dir.path(), "r1").unwrap();
    for f in bundle.files.iter().filter(|f| f.ends_with(".csv")) {
        assert_eq!(
            std::fs::read(bundle.dir.join(f)).unwrap(),
            std::fs::read(again.dir.join(f)).unwrap()
        );
    }
    assert!(!std::fs::read_to_string(bundle.dir.join("cost.csv")).unwrap().contains("0.37"));
}

#[test]
fn empty_report_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = ReportInputs {
        runs: vec![fake_run(AlgorithmId::Ssd, &[])],
        steps: Vec::new(),
    };
    assert_eq!(emit_report(&inputs, dir.path(), "r").unwrap_err().code(), "EMPTY_INPUT");
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    assert!(emit_report(&ReportInputs::default(), dir.path(), "r").is_err());
}

// single-step evaluation and commands -----------------------------------------

#[test]
fn identity_step_is_harmless() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path());
    let eval = evaluate_step(&ws, AlgorithmId::Identity, &HyperParams::defaults(AlgorithmId::Identity)).unwrap();
    assert_eq!(eval.attack("update_leak").unwrap().scores, eval.attack("base_model").unwrap().scores);
    assert!(!eval.verdict.harm);
    assert_eq!(eval.verdict.update, eval.verdict.base);
    assert_eq!(eval.attacks.len(), 5);
    assert_eq!(eval.epsilon.epsilon.len(), ws.plan.forget_sequence[0].len());
    assert_eq!(eval.cost.gradient_steps, 0);
}

#[test]
fn iterate_then_report_via_commands() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.attack.every = 0;
    let ws = Workspace::with_store(cfg, Store::open(dir.path()).unwrap()).unwrap();
    let out = commands::iterate(&ws, &[AlgorithmId::Identity, AlgorithmId::Ssd], Some(3), None).unwrap();
    assert!(!out.failed);
    let runs = out.value["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    let flat: Vec<f64> = serde_json::from_value(runs[0]["test_accuracy"].clone()).unwrap();
    assert!(flat.windows(2).all(|w| w[0] == w[1]));
    let bundle = commands::report(&ws, &[], None).unwrap().value;
    let dir_out = std::path::PathBuf::from(bundle["dir"].as_str().unwrap());
    let table = std::fs::read_to_string(dir_out.join("trajectory.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("identity,")).count(), 3);
    assert_eq!(table.lines().filter(|l| l.starts_with("ssd,")).count(), 3);
    let e = commands::report(&ws, &["missing".into()], None).unwrap_err();
    assert_eq!(e.code(), "NOT_FOUND");
    let plan = commands::make_plan(&ws).unwrap().value;
    assert_eq!(plan["forget_set_size"], 10);
}
