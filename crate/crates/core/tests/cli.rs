use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn operant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_operant"))
        .args(args)
        .env_remove("OPERANT_THREADS")
        .output()
        .expect("binary runs")
}

fn advection_config(dir: &Path) -> Value {
    json!({
        "benchmark": "advection",
        "network": { "variant": "modified-deeponet", "width": 8, "depth": 3 },
        "train": { "scheme": "ntk-guided", "alpha": 0.5, "batch_size": 8, "iterations": 20, "log_every": 5 },
        "grf": { "kernel_family": "squared-exponential", "length_scale": 0.2, "output_scale": 1.0 },
        "data": { "n_train": 2, "n_test": 10, "m": 20, "p": 2, "q": 6, "test_nx": 21, "test_nt": 21 },
        "output_dir": dir.join("out"),
        "seed": 5
    })
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn missing_config_names_the_path() {
    let out = operant(&["train", "--config", "/nonexistent/missing.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/missing.cfg"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = operant(&["train", "--config", "x.json", "--learning-rate", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = operant(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = advection_config(dir.path());
    cfg["train"]["learnng_rate"] = json!(0.1);
    let path = write_config(dir.path(), &cfg);
    let out = operant(&["generate-data", "--config", &path]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnng_rate"));
}

#[test]
fn runtime_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &advection_config(dir.path()));
    // No dataset generated yet.
    let out = operant(&["train", "--config", &path]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn generate_train_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &advection_config(dir.path()));
    let out_dir = dir.path().join("out");

    let summary: Value = serde_json::from_slice(&ok(operant(&["--json", "generate-data", "--config", &path])).stdout).unwrap();
    assert_eq!(summary["n_test"], 10);
    assert!(out_dir.join("dataset/inputs/test_00009.csv").is_file());
    assert!(out_dir.join("dataset/inputs/test_00009.json").is_file());

    ok(operant(&["train", "--config", &path]));
    let model: Value = serde_json::from_str(&read(&out_dir.join("model.json"))).unwrap();
    assert_eq!(model["config"]["seed"], 5);
    assert_eq!(model["seed"], 5);
    let log = read(&out_dir.join("train_log.csv"));
    assert!(log.starts_with("step,loss_ic,loss_bc,loss_res"));

    let model_bytes = std::fs::read(out_dir.join("model.json")).unwrap();
    let summary: Value = serde_json::from_slice(&ok(operant(&["--json", "evaluate", "--config", &path])).stdout).unwrap();
    assert_eq!(summary["n"], 10);
    let csv = read(&out_dir.join("eval_report.csv"));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    for row in rows {
        let err: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(err >= 0.0 && err.is_finite());
    }
    let report: Value = serde_json::from_str(&read(&out_dir.join("eval_report.json"))).unwrap();
    assert_eq!(report["seed"], 5);
    assert_eq!(report["config"]["data"]["n_test"], 10);
    // Evaluation leaves the model untouched.
    assert_eq!(std::fs::read(out_dir.join("model.json")).unwrap(), model_bytes);
}

#[test]
fn full_ntk_probe_on_twenty_terms() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &advection_config(dir.path()));
    let out_dir = dir.path().join("out");
    ok(operant(&["generate-data", "--config", &path]));
    ok(operant(&["ntk-probe", "--full", "--config", &path]));
    let spectrum = read(&out_dir.join("ntk_spectrum.csv"));
    let mut lines = spectrum.lines();
    assert_eq!(lines.next(), Some("rank,eigenvalue"));
    let values: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 20);
    let trace: f64 = values.iter().sum();
    assert!(values.iter().all(|&v| v >= -1e-10 * trace), "{values:?}");
    let diag = read(&out_dir.join("ntk_diag.csv"));
    assert_eq!(diag.lines().count(), 21);
}

#[test]
fn exports_are_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &advection_config(dir.path()));
    let out_dir = dir.path().join("out");
    let files = [
        "train_log.csv",
        "eval_report.csv",
        "ntk_diag.csv",
        "weight_map.csv",
        "grad_histogram.csv",
        "dataset/inputs/train_00000.csv",
    ];
    let run = || {
        ok(operant(&["generate-data", "--config", &path]));
        ok(operant(&["train", "--config", &path]));
        ok(operant(&["evaluate", "--config", &path]));
        ok(operant(&["ntk-probe", "--config", &path]));
        ok(operant(&["export-weight-map", "--config", &path, "--sample", "1"]));
        ok(operant(&["export-grad-histogram", "--config", &path, "--samples", "0,1", "--bins", "10"]));
        files.map(|f| std::fs::read(out_dir.join(f)).unwrap())
    };
    let first = run();
    std::fs::remove_dir_all(&out_dir).unwrap();
    let second = run();
    for (name, (a, b)) in files.iter().zip(first.iter().zip(&second)) {
        assert_eq!(a, b, "{name} differs between runs");
    }

    let map = read(&out_dir.join("weight_map.csv"));
    assert!(map.starts_with("x,t,lambda\n"));
    assert_eq!(map.lines().count(), 1 + 21 * 21);
    let hist = read(&out_dir.join("grad_histogram.csv"));
    assert!(hist.starts_with("sample_id,bin_left,bin_right,count\n"));
    assert_eq!(hist.lines().count(), 1 + 2 * 10);
}

#[test]
fn thread_flag_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &advection_config(dir.path()));
    let out = operant(&["--threads", "0", "generate-data", "--config", &path]);
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_operant"))
        .args(["generate-data", "--config", &path])
        .env("OPERANT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    ok(operant(&["--threads", "1", "generate-data", "--config", &path]));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let path = e.unwrap().path();
        operant::bench::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert_eq!(n, 3);
}
