use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "data": {
    "source": { "kind": "synthetic", "shape": [1, 8, 8], "train_pool": 600, "test_pool": 200, "noise": 0.5, "max_shift": 0 },
    "val_size": 100,
    "forget_fraction": 0.02,
    "iterations": 3
  },
  "model": { "family": "mlp", "width": 32, "train": { "epochs": 4, "batch_size": 64, "augment": false } },
  "attack": { "every": 0, "shadows": 16, "pairs": 16, "shadow_epochs": 2 },
  "tune": { "trials": 2 }
}"#;

fn fbench(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbench"))
        .args(args)
        .current_dir(dir)
        .env("BENCH_STORE", dir.join("store"))
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({ "report": { "out_dir": dir.path().join("reports") } });
    let mut tiny: Value = serde_json::from_str(TINY).unwrap();
    tiny["report"] = cfg["report"].clone();
    std::fs::write(dir.path().join("c.json"), tiny.to_string()).unwrap();
    dir
}

fn json_stdout(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn iterate_identity_then_report_gives_a_flat_trajectory() {
    let dir = setup();
    let it = json_stdout(&fbench(dir.path(), &["iterate", "--config", "c.json", "--algo", "identity"]));
    let accs = it["runs"][0]["test_accuracy"].as_array().unwrap();
    assert_eq!(accs.len(), 3);
    assert!(accs.windows(2).all(|w| w[0] == w[1]));
    let rep = json_stdout(&fbench(dir.path(), &["report", "--config", "c.json"]));
    let table = std::fs::read_to_string(Path::new(rep["dir"].as_str().unwrap()).join("trajectory.csv")).unwrap();
    let values: Vec<&str> = table
        .lines()
        .filter(|l| l.starts_with("identity,"))
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert_eq!(values.len(), 3);
    assert!(values.iter().all(|v| *v == values[0]));
    assert!(dir.path().join("store").join("plans").exists());
}

#[test]
fn unknown_subcommand_prints_usage_and_fails() {
    let dir = setup();
    let out = fbench(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"));
    assert!(err.contains("Config: one JSON file"));
}

#[test]
fn errors_are_machine_readable() {
    let dir = setup();
    let out = fbench(dir.path(), &["unlearn", "--config", "c.json", "--algo", "nope"]);
    assert!(!out.status.success());
    let first = String::from_utf8_lossy(&out.stderr).lines().next().unwrap().to_string();
    let v: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["error"], "UNKNOWN_ALGO");

    let out = fbench(dir.path(), &["make-plan", "--config", "missing.json"]);
    assert!(!out.status.success());
    let first = String::from_utf8_lossy(&out.stderr).lines().next().unwrap().to_string();
    let v: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["error"], "IO");

    let out = fbench(dir.path(), &["make-plan", "--config", "c.json", "--set", "attack.nonsense=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("BAD_CONFIG"));
}

#[test]
fn make_plan_and_train_base_are_reproducible() {
    let dir = setup();
    let a = json_stdout(&fbench(dir.path(), &["make-plan", "--config", "c.json"]));
    let b = json_stdout(&fbench(dir.path(), &["make-plan", "--config", "c.json"]));
    assert_eq!(a, b);
    assert_eq!(a["forget_set_size"], 10);
    let t1 = json_stdout(&fbench(dir.path(), &["train-base", "--config", "c.json"]));
    let t2 = json_stdout(&fbench(dir.path(), &["train-base", "--config", "c.json"]));
    assert_eq!(t1, t2);
    let u = json_stdout(&fbench(dir.path(), &["unlearn", "--config", "c.json", "--algo", "finetune", "--set", "unlearn.hyperparams.epochs=1"]));
    assert_eq!(u["parent"], t1["checkpoint_id"]);
    assert!(u["cost"]["gradient_steps"].as_u64().unwrap() > 0);
}

#[test]
fn tune_writes_the_best_configuration() {
    let dir = setup();
    let out = json_stdout(&fbench(
        dir.path(),
        &["tune", "--config", "c.json", "--algo", "ssd", "--trials", "2", "--out", "best.json"],
    ));
    assert_eq!(out["trials"], 2);
    let best: Value = serde_json::from_slice(&std::fs::read(dir.path().join("best.json")).unwrap()).unwrap();
    assert_eq!(best["algorithm"], "ssd");
    assert!(best["hyperparams"]["alpha_ssd"].is_number());
    let run = out["run_id"].as_str().unwrap();
    let trials = std::fs::read_to_string(dir.path().join("store").join("runs").join(run).join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 3);
}

#[test]
fn schema_lists_every_section() {
    let dir = setup();
    let out = json_stdout(&fbench(dir.path(), &["schema"]));
    let help = out["help"].as_str().unwrap();
    for section in ["data", "model", "unlearn", "attack", "tune", "report"] {
        assert!(help.contains(&format!("\"{section}\"")), "{section}");
    }
}
