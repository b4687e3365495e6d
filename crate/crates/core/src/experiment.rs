//! Particle simulation, snapshot fitting and the noise-identification
//! comparison experiment.
//!
//! Randomness is drawn from ChaCha20 keyed by `base_seed + trial`. Stream 0
//! draws the system matrix; stream `i + 1` drives particle `i`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bridge::{self, Trajectory};
use crate::error::{Error, Result};
use crate::identification::{self, Method, Snapshots};
use crate::linalg::{self, spd_sqrt, symmetrize, Gaussian};
use crate::system::{GaussianPrior, LinearSystem};
use crate::tolerances::TOL;

/// Scale of the identity added to rank-deficient snapshot fits, relative to `Tr(Σ)/n`.
pub const FIT_REGULARIZATION: f64 = 1e-9;

pub const RNG_NAME: &str = "ChaCha20 (rand_chacha 0.9); key = base_seed + trial; stream 0 draws A, stream i+1 drives particle i";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ASpec {
    /// `A = 0.8 I + 0.3 Υ` with `Υ_ij ~ U[−0.5, 0.5]`.
    #[serde(rename = "random-0.8I-plus-0.3U")]
    Random,
    #[serde(rename = "explicit")]
    Explicit(#[serde(with = "linalg::serde_matrix")] DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BSpec {
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "explicit")]
    Explicit(#[serde(with = "linalg::serde_matrix")] DMatrix<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotMode {
    /// ML fits to simulated particles.
    Sampled,
    /// Exact marginals of the true reference process.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub n: usize,
    pub particles: usize,
    pub trials: usize,
    pub alt_iters: usize,
    pub alpha: f64,
    pub base_seed: u64,
    pub a_spec: ASpec,
    pub b_spec: BSpec,
    pub methods: Vec<Method>,
    pub snapshots: SnapshotMode,
}

impl ExperimentConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            t: 10,
            n: 2,
            particles: 100,
            trials: 10,
            alt_iters: 10,
            alpha,
            base_seed: 0,
            a_spec: ASpec::Random,
            b_spec: BSpec::Identity,
            methods: Method::ALL.to_vec(),
            snapshots: SnapshotMode::Sampled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.t < 2 {
            return bad("T must be at least 2");
        }
        if self.n == 0 {
            return bad("n must be positive");
        }
        if self.particles < 2 {
            return bad("particles must be at least 2");
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if self.methods.is_empty() {
            return bad("no methods selected");
        }
        if let ASpec::Explicit(a) = &self.a_spec {
            if a.shape() != (self.n, self.n) {
                return bad("explicit A does not match n");
            }
        }
        if let BSpec::Explicit(b) = &self.b_spec {
            if b.nrows() != self.n {
                return bad("explicit B does not match n");
            }
        }
        Ok(())
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.base_seed.wrapping_add(trial as u64)
    }

    pub fn input_dim(&self) -> usize {
        match &self.b_spec {
            BSpec::Identity => self.n,
            BSpec::Explicit(b) => b.ncols(),
        }
    }
}

/// `α((T−1−k)/(T−1)·0.1 I + k/(T−1)·I)` of size `n`.
pub fn true_noise_cov(k: usize, t: usize, n: usize, alpha: f64) -> Result<DMatrix<f64>> {
    if t < 2 || k > t - 1 {
        return Err(Error::BadRange(format!("k = {k} outside 0..={} or T < 2", t.saturating_sub(1))));
    }
    let span = (t - 1) as f64;
    let scale = alpha * ((t - 1 - k) as f64 / span * 0.1 + k as f64 / span);
    Ok(DMatrix::identity(n, n) * scale)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn standard_normal(rng: &mut ChaCha20Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// `A = 0.8 I + 0.3 Υ` from stream 0 of `seed`.
pub fn draw_system_matrix(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, 0);
    let upsilon = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..=0.5));
    DMatrix::identity(n, n) * 0.8 + upsilon * 0.3
}

/// Trajectories of `x_{k+1} = A_k x_k + B_k w_k`, `w_k ~ 𝒩(0, noise[k])`.
pub fn simulate_particles(
    sys: &LinearSystem,
    noise: &[DMatrix<f64>],
    init: &Gaussian,
    count: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let t = sys.horizon();
    if noise.len() != t || init.dim() != sys.state_dim() {
        return Err(Error::dims("noise sequence or initial law does not match the system"));
    }
    let roots = noise.iter().map(spd_sqrt).collect::<Result<Vec<_>>>()?;
    for (k, r) in roots.iter().enumerate() {
        if r.nrows() != sys.input_dim() {
            return Err(Error::dims(format!("noise at step {k} does not match the input dimension")));
        }
    }
    let root0 = spd_sqrt(init.cov())?;
    let n = sys.state_dim();
    Ok((0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64 + 1);
            let mut states = Vec::with_capacity(t + 1);
            states.push(init.mean() + &root0 * standard_normal(&mut rng, n));
            for k in 0..t {
                let w = &roots[k] * standard_normal(&mut rng, roots[k].ncols());
                let next = sys.a(k) * &states[k] + sys.b(k) * w;
                states.push(next);
            }
            Trajectory { states }
        })
        .collect())
}

/// Sample mean and covariance with divisor `N`.
pub fn fit_gaussian_ml(samples: &[DVector<f64>]) -> Result<Gaussian> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples(samples.len()));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::dims("samples have different lengths"));
    }
    let count = samples.len() as f64;
    let mean = samples.iter().fold(DVector::zeros(d), |acc, s| acc + s) / count;
    let cov = samples.iter().fold(DMatrix::zeros(d, d), |acc, s| {
        let c = s - &mean;
        acc + &c * c.transpose()
    }) / count;
    Gaussian::new(mean, symmetrize(&cov))
}

/// Adds `1e-9·Tr(Σ)/n·I` when `Σ` is not positive definite. Returns whether it did.
pub fn regularize_fit(g: &Gaussian) -> Result<(Gaussian, bool)> {
    if linalg::pd_inverse(g.cov()).is_ok() {
        return Ok((g.clone(), false));
    }
    let n = g.dim();
    let trace = g.cov().trace();
    let shift = if trace > 0.0 { FIT_REGULARIZATION * trace / n as f64 } else { FIT_REGULARIZATION };
    let cov = g.cov() + DMatrix::identity(n, n) * shift;
    Ok((Gaussian::new(g.mean().clone(), cov)?, true))
}

/// `‖est − truth‖_F / ‖truth‖_F`.
pub fn relative_error(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if est.shape() != truth.shape() {
        return Err(Error::dims("estimate and truth differ in shape"));
    }
    let denom = truth.norm();
    if denom == 0.0 {
        return Err(Error::ZeroTruth);
    }
    Ok((est - truth).norm() / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodOutcome {
    pub method: Method,
    /// Relative error at each `k`; absent when the method failed.
    pub rel_errors: Option<Vec<f64>>,
    #[serde(serialize_with = "serialize_estimate")]
    pub estimate: Option<Vec<DMatrix<f64>>>,
    pub failure: Option<String>,
}

fn serialize_estimate<S: serde::Serializer>(v: &Option<Vec<DMatrix<f64>>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(ms) => linalg::serde_matrices::serialize(ms, s),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    #[serde(with = "linalg::serde_matrix")]
    pub a: DMatrix<f64>,
    pub snapshots: Snapshots,
    pub regularized_fits: usize,
    pub outcomes: Vec<MethodOutcome>,
}

impl TrialResult {
    pub fn outcome(&self, method: Method) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub k: usize,
    pub method: Method,
    pub mean_rel_err: f64,
    pub std_rel_err: f64,
    pub n_success: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentMetadata {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub rng: &'static str,
    pub fit_regularization: f64,
    pub regularized_fits: usize,
    pub failures: Vec<String>,
    pub version: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub trials: Vec<TrialResult>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentResult {
    pub fn row(&self, method: Method, k: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method && r.k == k)
    }

    /// Mean over `k` of the per-step mean relative errors.
    pub fn k_average(&self, method: Method) -> f64 {
        let rows: Vec<_> = self.summary.iter().filter(|r| r.method == method).collect();
        rows.iter().map(|r| r.mean_rel_err).sum::<f64>() / rows.len() as f64
    }

    pub fn metadata(&self) -> ExperimentMetadata {
        let failures = self
            .trials
            .iter()
            .flat_map(|t| {
                t.outcomes
                    .iter()
                    .filter_map(move |o| o.failure.as_ref().map(|f| format!("trial {} {}: {f}", t.trial, o.method)))
            })
            .collect();
        ExperimentMetadata {
            config: self.config.clone(),
            seeds: self.trials.iter().map(|t| t.seed).collect(),
            rng: RNG_NAME,
            fit_regularization: FIT_REGULARIZATION,
            regularized_fits: self.trials.iter().map(|t| t.regularized_fits).sum(),
            failures,
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    /// Columns `k,method,mean_rel_err,std_rel_err,n_success`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_summary_csv(&self.summary, out)
    }
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let io = |e: csv::Error| Error::InvalidConfig(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "method", "mean_rel_err", "std_rel_err", "n_success"]).map_err(io)?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.method.to_string(),
            format!("{:.16e}", r.mean_rel_err),
            format!("{:.16e}", r.std_rel_err),
            r.n_success.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(())
}

/// Two-pass mean and sample standard deviation (divisor `N − 1`; zero for one value).
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let count = values.len() as f64;
    let mean = values.iter().sum::<f64>() / count;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (count - 1.0)).sqrt())
}

fn build_system(cfg: &ExperimentConfig, seed: u64) -> Result<LinearSystem> {
    let a = match &cfg.a_spec {
        ASpec::Random => draw_system_matrix(cfg.n, seed),
        ASpec::Explicit(a) => a.clone(),
    };
    let b = match &cfg.b_spec {
        BSpec::Identity => DMatrix::identity(cfg.n, cfg.n),
        BSpec::Explicit(b) => b.clone(),
    };
    LinearSystem::time_invariant(a, b, cfg.t)
}

fn truth_sequence(cfg: &ExperimentConfig) -> Result<Vec<DMatrix<f64>>> {
    (0..cfg.t).map(|k| true_noise_cov(k, cfg.t, cfg.input_dim(), cfg.alpha)).collect()
}

fn observe(cfg: &ExperimentConfig, sys: &LinearSystem, truth: &[DMatrix<f64>], seed: u64) -> Result<(Snapshots, usize)> {
    let init = Gaussian::standard(cfg.n);
    match cfg.snapshots {
        SnapshotMode::Exact => {
            let prior = GaussianPrior::zero_mean(truth.to_vec())?;
            let marg = bridge::reference_process(sys, &prior, &init)?.marginals();
            let terminal = Gaussian::new(marg.last_mean().clone(), marg.last_cov().clone())?;
            Ok((Snapshots { initial: init, terminal }, 0))
        }
        SnapshotMode::Sampled => {
            let paths = simulate_particles(sys, truth, &init, cfg.particles, seed)?;
            let at = |k: usize| paths.iter().map(|p| p.states[k].clone()).collect::<Vec<_>>();
            let (initial, r0) = regularize_fit(&fit_gaussian_ml(&at(0))?)?;
            let (terminal, r1) = regularize_fit(&fit_gaussian_ml(&at(cfg.t))?)?;
            Ok((Snapshots { initial, terminal }, r0 as usize + r1 as usize))
        }
    }
}

pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialResult> {
    let seed = cfg.trial_seed(trial);
    let sys = build_system(cfg, seed)?;
    let truth = truth_sequence(cfg)?;
    let (snapshots, regularized_fits) = observe(cfg, &sys, &truth, seed)?;
    let theta0 = DMatrix::identity(cfg.input_dim(), cfg.input_dim());
    let outcomes = cfg
        .methods
        .iter()
        .map(|&method| {
            let est = identification::estimate(method, &sys, &snapshots, &snapshots.initial, &theta0, cfg.alt_iters)
                .and_then(|e| {
                    let seq = e.expand(cfg.t);
                    let errs = seq.iter().zip(&truth).map(|(s, w)| relative_error(s, w)).collect::<Result<Vec<_>>>()?;
                    Ok((seq, errs))
                });
            match est {
                Ok((seq, errs)) => MethodOutcome { method, rel_errors: Some(errs), estimate: Some(seq), failure: None },
                Err(e) => MethodOutcome { method, rel_errors: None, estimate: None, failure: Some(e.to_string()) },
            }
        })
        .collect();
    Ok(TrialResult { trial, seed, a: sys.a(0).clone(), snapshots, regularized_fits, outcomes })
}

/// Per-method, per-step mean and standard deviation over successful trials,
/// in trial order.
pub fn aggregate(cfg: &ExperimentConfig, trials: &[TrialResult]) -> Vec<SummaryRow> {
    let mut rows = Vec::with_capacity(cfg.methods.len() * cfg.t);
    for &method in &cfg.methods {
        for k in 0..cfg.t {
            let values: Vec<f64> = trials
                .iter()
                .filter_map(|t| t.outcome(method)?.rel_errors.as_ref().map(|e| e[k]))
                .collect();
            let (mean, std) = mean_and_std(&values);
            rows.push(SummaryRow { k, method, mean_rel_err: mean, std_rel_err: std, n_success: values.len() });
        }
    }
    rows
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let trials = (0..cfg.trials).map(|i| run_trial(cfg, i)).collect::<Result<Vec<_>>>()?;
    let summary = aggregate(cfg, &trials);
    Ok(ExperimentResult { config: cfg.clone(), trials, summary })
}

/// Whether both snapshot covariances are positive definite.
pub fn snapshot_is_pd(s: &Snapshots) -> bool {
    [s.initial.cov(), s.terminal.cov()]
        .iter()
        .all(|c| linalg::min_eigenvalue(c) > TOL.pd * c.norm().max(1.0))
}
