//! Acceptance criteria, one PASS/FAIL line each.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use midc::verify::{self, CheckOutcome};

const BASE_SEED: u64 = 0;

const PROBLEM: &str = r#"{
  "system": {"T": 4, "n": 2, "m": 2, "A": [[1.0, 0.2], [-0.1, 0.9]], "B": [[1.0, 0.0], [0.3, 0.8]]},
  "mu_ini": [1.0, -0.5],
  "sigma_ini": [[1.0, 0.1], [0.1, 0.6]],
  "mu_fin": [-1.0, 2.0],
  "sigma_fin": [[2.0, -0.3], [-0.3, 1.5]]
}"#;

const SYSTEM: &str = r#"{"T": 5, "n": 2, "m": 2, "A": [[0.9, 0.1], [-0.1, 0.95]], "B": [[1.0, 0.0], [0.0, 1.0]]}"#;

const SNAPSHOTS: &str = r#"{
  "initial": {"mean": [0.0, 0.0], "cov": [[1.0, 0.0], [0.0, 1.0]]},
  "terminal": {"mean": [0.0, 0.0], "cov": [[3.0, 0.2], [0.2, 2.5]]}
}"#;

fn midc(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_midc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("midc {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

/// Every file under `dir`, sorted by relative path.
fn collect(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_path_buf();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn cli_outputs() -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let inputs = root.join("inputs");
    fs::create_dir(&inputs).map_err(|e| e.to_string())?;
    fs::write(inputs.join("problem.json"), PROBLEM).map_err(|e| e.to_string())?;
    fs::write(inputs.join("system.json"), SYSTEM).map_err(|e| e.to_string())?;
    fs::write(inputs.join("snapshots.json"), SNAPSHOTS).map_err(|e| e.to_string())?;
    midc(&["solve-midc", "--problem", "inputs/problem.json", "--iters", "8", "--out", "out/trace.json"], root)?;
    for method in ["alg4", "sbid", "sbtvid"] {
        midc(
            &["estimate-noise", "--system", "inputs/system.json", "--snapshots", "inputs/snapshots.json", "--method", method, "--out-dir", "out"],
            root,
        )?;
    }
    for alpha in ["0.2", "1", "5"] {
        midc(&["experiment", "--alpha", alpha, "--trials", "3", "--seed", "7", "--out-dir", "out"], root)?;
    }
    Ok(collect(&root.join("out")))
}

fn cli_determinism() -> CheckOutcome {
    let lib = verify::check_determinism();
    let (passed, detail) = match (cli_outputs(), cli_outputs()) {
        (Ok(a), Ok(b)) => {
            let names_match = a.iter().map(|f| &f.0).eq(b.iter().map(|f| &f.0));
            let differing: Vec<_> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.display().to_string()).collect();
            let bytes: usize = a.iter().map(|f| f.1.len()).sum();
            (
                names_match && differing.is_empty() && a.len() == 13,
                format!("{} CLI output files ({bytes} bytes) compared, differing: {differing:?}; library: {}", a.len(), lib.detail),
            )
        }
        (Err(e), _) | (_, Err(e)) => (false, e),
    };
    CheckOutcome { passed: passed && lib.passed, detail, ..lib }
}

fn main() -> ExitCode {
    let checks: Vec<Box<dyn Fn() -> CheckOutcome>> = vec![
        Box::new(verify::check_golden_scalar),
        Box::new(|| verify::check_riccati_lyapunov(50, BASE_SEED)),
        Box::new(|| verify::check_terminal_marginals(50, BASE_SEED)),
        Box::new(|| verify::check_monotone(50, BASE_SEED)),
        Box::new(|| verify::check_moment_equivalence(50, BASE_SEED)),
        Box::new(|| verify::check_alternation_equivalence(20, BASE_SEED)),
        Box::new(|| verify::check_optimality(20, BASE_SEED)),
        Box::new(|| verify::check_zero_mean_prior(10, 100, BASE_SEED)),
        Box::new(|| verify::check_process_identities(20, BASE_SEED)),
        Box::new(|| verify::check_experiment(BASE_SEED)),
        Box::new(cli_determinism),
    ];
    let mut failed = 0;
    for check in &checks {
        let o = check();
        if !o.passed {
            failed += 1;
        }
        println!("{o}");
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
