use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qntk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qntk")).args(args).output().expect("binary runs")
}

fn small(experiment: &str, out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec![experiment, "--qubits", "2", "--layers", "6", "--steps", "10", "--runs", "2", "--out", out];
    args.extend_from_slice(extra);
    qntk(&args)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_lists_every_experiment() {
    let out = qntk(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["decay", "kbar-ensemble", "scaling-L", "noise-sweep", "lr-sweep", "tnoise", "classical-width", "haar-moments", "concentration"] {
        assert!(text.contains(name), "missing {name}");
    }
}

#[test]
fn default_config_is_printed() {
    let out = qntk(&["config", "noise-sweep"]);
    assert!(out.status.success());
    let cfg: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["experiment"], "noise-sweep");
    assert_eq!(cfg["n_qubits"], 4);
    assert_eq!(cfg["n_layers"], 64);
    assert_eq!(cfg["eta"], 0.005);
    assert_eq!(cfg["n_runs"], 10);
    assert_eq!(qntk(&["config", "nope"]).status.code(), Some(2));
}

#[test]
fn zero_rate_decay_writes_flat_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = small("decay", dir.path(), &["--eta", "0"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    for name in ["summary.json", "plotdata.csv", "manifest.json", "traces/decay_run000.csv", "traces/decay_run001.csv"] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    assert!(!dir.path().join("failures.json").exists());
    let trace = fs::read_to_string(dir.path().join("traces/decay_run000.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next().unwrap(), "step,eps,loss,K,max_dtheta");
    let eps: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(eps.len(), 11);
    assert!(eps.iter().all(|e| *e == eps[0]));
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["schema"], "qntk-summary/1");
    assert_eq!(summary["passed"], true);
    assert_eq!(summary["config"]["n_qubits"], 2);
}

#[test]
fn manifest_replays_byte_identical_csvs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small("noise-sweep", a.path(), &["--seed", "17", "--jobs", "2"]);
    let manifest = a.path().join("manifest.json");
    let m = read_json(&manifest);
    assert_eq!(m["schema"], "qntk-manifest/1");
    assert_eq!(m["seed"], 17);
    qntk(&["noise-sweep", "--config", manifest.to_str().unwrap(), "--out", b.path().to_str().unwrap()]);
    let files = m["files"].as_array().unwrap();
    assert!(files.len() > 5);
    for f in files.iter().map(|f| f.as_str().unwrap()).filter(|f| f.ends_with(".csv")) {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn failing_checks_exit_nonzero_with_failure_list() {
    let dir = tempfile::tempdir().unwrap();
    let out = small("decay", dir.path(), &["--k-max", "1e-9"]);
    assert_eq!(out.status.code(), Some(1));
    let failures = read_json(&dir.path().join("failures.json"));
    assert_eq!(failures["failures"][0]["name"], "runs_after_filter");
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["passed"], false);
    assert!(summary["notes"][0].as_str().unwrap().contains("excluded by k_max"));
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\n  \"n_qubits\": 2,\n  \"eta_sweep\": []\n}\n").unwrap();
    let out = qntk(&["lr-sweep", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 3") && err.contains("eta_sweep"), "{err}");
}

#[test]
fn config_for_another_experiment_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"experiment": "tnoise"}"#).unwrap();
    let out = qntk(&["decay", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("tnoise"));
}

#[test]
fn identity_observable_gives_zero_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let out = qntk(&["kbar-ensemble", "--qubits", "2", "--layers", "4", "--samples", "30", "--observable", "identity", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let plot = fs::read_to_string(dir.path().join("plotdata.csv")).unwrap();
    for line in plot.lines().skip(1) {
        let k: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(k.abs() < 1e-12);
    }
}

#[test]
fn overrides_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = small("decay", dir.path(), &["--eta", "-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("eta"));
}
