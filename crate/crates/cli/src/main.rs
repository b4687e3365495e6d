use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use midc::experiment::{self, ExperimentConfig};
use midc::identification::{self, Method, NoiseEstimate, Snapshots};
use midc::midc::{alternate_midc_general, AlternationOptions, DensitySteeringProblem, MeanSteering, TraceReport};
use midc::{verify, AffinePolicy, GaussianPrior, LinearSystem};

#[derive(Parser)]
#[command(name = "midc", version, about = "MI-regularized density control and Schrödinger bridge noise identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Alternate policy and prior updates on a density steering problem.
    SolveMidc {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        /// Scale c of the initial prior c·I.
        #[arg(long, default_value_t = 1.0)]
        rho0: f64,
        /// Stop when the prior stops changing.
        #[arg(long)]
        early_stop: bool,
        /// Trace JSON destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the process noise covariance from two snapshots.
    EstimateNoise {
        #[arg(long)]
        system: PathBuf,
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        /// Initial guess c·I for the noise covariance.
        #[arg(long, default_value_t = 1.0)]
        theta0: f64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the noise identification comparison for one α.
    Experiment {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Full configuration JSON; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the built-in numerical checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the identification experiment.
        #[arg(long)]
        quick: bool,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: midc::Error| e.to_string())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::SolveMidc { problem, iters, rho0, early_stop, out } => solve_midc(&problem, iters, rho0, early_stop, out.as_deref()),
        Command::EstimateNoise { system, snapshots, method, iters, theta0, out_dir } => {
            estimate_noise(&system, &snapshots, method, iters, theta0, &out_dir)
        }
        Command::Experiment { alpha, trials, particles, seed, config, out_dir } => {
            let mut cfg = match config {
                Some(path) => {
                    let mut cfg: ExperimentConfig = read_json(&path)?;
                    cfg.alpha = alpha;
                    cfg
                }
                None => ExperimentConfig::new(alpha),
            };
            if let Some(v) = trials {
                cfg.trials = v;
            }
            if let Some(v) = particles {
                cfg.particles = v;
            }
            if let Some(v) = seed {
                cfg.base_seed = v;
            }
            run_experiment(&cfg, &out_dir)
        }
        Command::Verify { seed, quick } => {
            let outcomes = verify::run_all(seed, !quick);
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} passed, {failed} failed", outcomes.len() - failed);
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    problem: &'a DensitySteeringProblem,
    rho0_scale: f64,
    iters: usize,
    steering: &'a MeanSteering,
    deviation_trace: TraceReport,
    objective_history: &'a [f64],
    terminal_cov_errors: &'a [f64],
    terminal_mean_errors: &'a [f64],
    final_policy: Option<&'a AffinePolicy>,
    final_prior: Option<&'a GaussianPrior>,
}

fn solve_midc(path: &Path, iters: usize, rho0: f64, early_stop: bool, out: Option<&Path>) -> Result<ExitCode> {
    let prob: DensitySteeringProblem = read_json(path)?;
    if !(rho0 > 0.0 && rho0.is_finite()) {
        bail!("--rho0 must be positive");
    }
    let sys = &prob.system;
    let prior = GaussianPrior::isotropic(sys.horizon(), sys.input_dim(), rho0)?;
    let mut opts = AlternationOptions::iterations(iters);
    if early_stop {
        opts = opts.with_early_stop();
    }
    let run = alternate_midc_general(&prob, &prior, opts)?;
    let output = SolveOutput {
        problem: &prob,
        rho0_scale: rho0,
        iters,
        steering: &run.steering,
        deviation_trace: run.deviation.report(),
        objective_history: &run.objective_history,
        terminal_cov_errors: &run.terminal_cov_errors,
        terminal_mean_errors: &run.terminal_mean_errors,
        final_policy: run.policies.last(),
        final_prior: run.priors.last(),
    };

    let mut table = String::new();
    table.push_str(&format!("{:>4}  {:>22}  {:>22}  {:>12}  {:>12}\n", "iter", "J after P", "J after R", "cov err", "mean err"));
    for (i, ec) in run.terminal_cov_errors.iter().enumerate() {
        let jp = run.objective_history[2 * i];
        let jr = run.objective_history.get(2 * i + 1).map_or("-".to_string(), |v| format!("{v:.15e}"));
        table.push_str(&format!(
            "{i:>4}  {jp:>22.15e}  {jr:>22}  {ec:>12.3e}  {:>12.3e}\n",
            run.terminal_mean_errors[i]
        ));
    }
    if let Some(h) = &run.deviation.halted {
        table.push_str(&format!("halted at iteration {}: {}\n", h.iteration, h.error));
    }

    match out {
        Some(p) => {
            write_json(p, &output)?;
            print!("{table}");
        }
        None => {
            eprint!("{table}");
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            serde_json::to_writer_pretty(&mut lock, &output)?;
            writeln!(lock)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    method: Method,
    iters: usize,
    theta0_scale: f64,
    estimate: &'a NoiseEstimate,
}

fn estimate_noise(sys_path: &Path, snap_path: &Path, method: Method, iters: usize, theta0: f64, out_dir: &Path) -> Result<ExitCode> {
    let sys: LinearSystem = read_json(sys_path)?;
    let snaps: Snapshots = read_json(snap_path)?;
    if !(theta0 > 0.0 && theta0.is_finite()) {
        bail!("--theta0 must be positive");
    }
    let m = sys.input_dim();
    let theta = nalgebra::DMatrix::identity(m, m) * theta0;
    let est = identification::estimate(method, &sys, &snaps, &snaps.initial, &theta, iters)?;
    fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(format!("noise_{}.csv", method.name()));
    let json_path = out_dir.join(format!("noise_{}.json", method.name()));
    let mut w = BufWriter::new(File::create(&csv_path)?);
    est.write_csv(&mut w, sys.horizon())?;
    w.flush()?;
    write_json(&json_path, &EstimateOutput { method, iters, theta0_scale: theta0, estimate: &est })?;
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(ExitCode::SUCCESS)
}

fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExitCode> {
    let res = experiment::run_experiment(cfg)?;
    fs::create_dir_all(out_dir)?;
    let stem = format!("experiment_alpha_{}", cfg.alpha);
    let csv_path = out_dir.join(format!("{stem}.csv"));
    let json_path = out_dir.join(format!("{stem}_metadata.json"));
    let mut w = BufWriter::new(File::create(&csv_path)?);
    res.write_csv(&mut w)?;
    w.flush()?;
    write_json(&json_path, &res.metadata())?;
    for &m in &cfg.methods {
        println!("{:<7} k-averaged mean relative error {:.6}", m.name(), res.k_average(m));
    }
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(ExitCode::SUCCESS)
}
