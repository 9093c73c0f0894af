use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sdeinfer(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sdeinfer")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_then_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("obs.csv");
    let chain = dir.path().join("chain.csv");
    sdeinfer(&["simulate", "--model", "gbm", "--observations", "20", "--seed", "3", "-o", path_str(&data)]);
    let text = fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().next().unwrap(), "time,value");
    assert_eq!(text.lines().count(), 21);
    let again = sdeinfer(&["simulate", "--model", "gbm", "--observations", "20", "--seed", "3"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);

    let out = sdeinfer(&[
        "estimate", "--data", path_str(&data), "--combo", "LC/Euler/Milstein", "--m", "2", "--iterations", "300",
        "--chain-out", path_str(&chain),
    ]);
    let record: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(record["param_names"], serde_json::json!(["alpha", "sigma2"]));
    assert_eq!(record["posterior_mean"].as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(&chain).unwrap().lines().count(), 301);
}

#[test]
fn cir_simulation_stays_positive() {
    let out = sdeinfer(&["simulate", "--model", "cir", "--observations", "30", "--fine-step", "1e-3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for line in text.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(v > 0.0);
    }
}

#[test]
fn density_table_columns() {
    let out = sdeinfer(&["density", "--model", "gbm", "--theta", "1,0.25", "--from", "100", "--points", "11"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "y_to,euler,milstein,exact");
    assert_eq!(lines.count(), 11);
}

#[test]
fn study_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdeinfer(&[
        "study", "--preset", "gbm", "--n-paths", "2", "--iterations", "200", "--m-values", "2", "--combos",
        "LC/Euler/Euler,MB/Euler/Milstein", "--output-dir", path_str(dir.path()), "--threads", "2",
    ]);
    let summary = String::from_utf8(out.stdout).unwrap();
    assert_eq!(summary.lines().count(), 3);
    for name in ["chains.csv", "estimates.csv", "summary.csv", "timings.csv", "manifest.json", "observations/path_001.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let printed = sdeinfer(&["study", "--preset", "cir-desk", "--print-config"]);
    let cfg = String::from_utf8(printed.stdout).unwrap();
    assert!(cfg.contains("model = \"cir\""));
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_sdeinfer")).args(["simulate", "--model", "gbm", "--theta", "1"]).output().unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}
