use std::fs;
use std::process::{Command, Output};

fn midc(args: &[&str], cwd: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_midc")).args(args).current_dir(cwd).output().unwrap()
}

const SCALAR: &str = r#"{"system": {"T": 2, "n": 1, "m": 1, "A": [[1.0]], "B": [[1.0]]},
  "sigma_ini": [[1.0]], "sigma_fin": [[3.0]], "mu_ini": [1.0], "mu_fin": [-2.0]}"#;

#[test]
fn solve_midc_prints_trace_json_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.json"), SCALAR).unwrap();
    let out = midc(&["solve-midc", "--problem", "p.json", "--iters", "4"], dir.path());
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["objective_history"].as_array().unwrap().len(), 8);
    assert_eq!(v["terminal_cov_errors"].as_array().unwrap().len(), 4);
    assert!(v["terminal_mean_errors"].as_array().unwrap().iter().all(|e| e.as_f64().unwrap() < 1e-9));
    let table = String::from_utf8(out.stderr).unwrap();
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn solve_midc_rejects_mismatched_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SCALAR.replace(r#""sigma_fin": [[3.0]]"#, r#""sigma_fin": [[3.0, 0.0], [0.0, 3.0]]"#);
    fs::write(dir.path().join("p.json"), bad).unwrap();
    let out = midc(&["solve-midc", "--problem", "p.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn estimate_noise_rejects_unknown_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = midc(&["estimate-noise", "--system", "s.json", "--snapshots", "x.json", "--method", "kalman"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kalman"));
}

#[test]
fn estimate_noise_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.json"), r#"{"T": 3, "n": 1, "m": 1, "A": [[0.9]], "B": [[1.0]]}"#).unwrap();
    fs::write(
        dir.path().join("x.json"),
        r#"{"initial": {"mean": [0.0], "cov": [[1.0]]}, "terminal": {"mean": [0.0], "cov": [[2.5]]}}"#,
    )
    .unwrap();
    let out = midc(&["estimate-noise", "--system", "s.json", "--snapshots", "x.json", "--method", "sbtvid", "--out-dir", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("o/noise_sbtvid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("o/noise_sbtvid.json")).unwrap()).unwrap();
    assert_eq!(v["method"], "sbtvid");
    assert_eq!(v["estimate"]["sigma"].as_array().unwrap().len(), 3);
}

#[test]
fn experiment_writes_per_alpha_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = midc(&["experiment", "--alpha", "0.2", "--trials", "2", "--particles", "40", "--out-dir", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("o/experiment_alpha_0.2.csv")).unwrap();
    assert!(csv.starts_with("k,method,mean_rel_err,std_rel_err,n_success\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 10);
    let meta: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("o/experiment_alpha_0.2_metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["particles"], 40);
    assert_eq!(meta["seeds"], serde_json::json!([0, 1]));
}

#[test]
fn experiment_config_file_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"T": 10, "bogus": 1}"#).unwrap();
    let out = midc(&["experiment", "--alpha", "1", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
