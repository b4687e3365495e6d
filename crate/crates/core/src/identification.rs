//! Noise-covariance identification from two snapshot distributions.
//!
//! Three estimators share one interface: the refined reference of the
//! generalized bridge (`alg4`), and plain bridges alternated with a
//! moment-matching covariance update, time-invariant (`sbid`) or per step
//! (`sbtvid`).

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bridge::{self, ProcessDistribution};
use crate::error::{Error, Result};
use crate::linalg::{self, spd_sqrt, symmetrize, Gaussian};
use crate::maxent;
use crate::midc::{self, AlternationOptions, MeanSteering};
use crate::system::{AffinePolicy, GaussianPrior, LinearSystem};

/// Gaussian fits of the state at `k = 0` and `k = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshots {
    pub initial: Gaussian,
    pub terminal: Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Alg4,
    Sbid,
    Sbtvid,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Alg4, Method::Sbid, Method::Sbtvid];

    pub fn name(self) -> &'static str {
        match self {
            Method::Alg4 => "alg4",
            Method::Sbid => "sbid",
            Method::Sbtvid => "sbtvid",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

/// Estimated noise covariances, one per step or a single shared one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseEstimate {
    #[serde(with = "linalg::serde_matrices")]
    pub sigma: Vec<DMatrix<f64>>,
    pub time_invariant: bool,
    /// Estimate after each iteration.
    #[serde(skip)]
    pub history: Vec<Vec<DMatrix<f64>>>,
}

impl NoiseEstimate {
    fn new(sigma: Vec<DMatrix<f64>>, time_invariant: bool, history: Vec<Vec<DMatrix<f64>>>) -> Result<Self> {
        for s in &sigma {
            linalg::pd_inverse(s)?;
        }
        Ok(Self { sigma, time_invariant, history })
    }

    pub fn cov(&self, k: usize) -> &DMatrix<f64> {
        if self.time_invariant {
            &self.sigma[0]
        } else {
            &self.sigma[k]
        }
    }

    /// Per-step covariances over a horizon of `t` steps.
    pub fn expand(&self, t: usize) -> Vec<DMatrix<f64>> {
        (0..t).map(|k| self.cov(k).clone()).collect()
    }

    /// CSV with columns `k`, row-major entries, spectral norm and ascending eigenvalues.
    pub fn write_csv<W: Write>(&self, out: W, t: usize) -> Result<()> {
        let m = self.sigma[0].nrows();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["k".to_string()];
        for i in 0..m {
            for j in 0..m {
                header.push(format!("theta_{i}_{j}"));
            }
        }
        header.push("spectral_norm".into());
        header.extend((0..m).map(|i| format!("eig_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for k in 0..t {
            let s = self.cov(k);
            let eig = linalg::sorted_eigenvalues(s);
            let mut row = vec![k.to_string()];
            for i in 0..m {
                for j in 0..m {
                    row.push(format!("{:.16e}", s[(i, j)]));
                }
            }
            row.push(format!("{:.16e}", eig.iter().fold(0.0f64, |a, e| a.max(e.abs()))));
            row.extend(eig.iter().map(|e| format!("{e:.16e}")));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidConfig(e.to_string())
}

/// Plain bridge between the snapshots for the reference noise `𝒩(ū_k^Θ, Θ_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainBridge {
    pub steering: MeanSteering,
    pub policy: AffinePolicy,
    pub controlled: ProcessDistribution,
    pub reference: ProcessDistribution,
}

pub fn plain_bridge(sys: &LinearSystem, theta: &[DMatrix<f64>], snaps: &Snapshots, init_ref: &Gaussian) -> Result<PlainBridge> {
    let t = sys.horizon();
    if theta.len() != t {
        return Err(Error::dims(format!("{} noise covariances for horizon {t}", theta.len())));
    }
    let roots = theta.iter().map(spd_sqrt).collect::<Result<Vec<_>>>()?;
    let beff: Vec<_> = (0..t).map(|k| sys.b(k) * &roots[k]).collect();
    let (mu_ini, mu_fin) = (snaps.initial.mean(), snaps.terminal.mean());
    let scaled = midc::mean_steering_with(sys, &beff, mu_ini, mu_fin)?;
    let steering = MeanSteering {
        u_bar: (0..t).map(|k| &roots[k] * &scaled.u_bar[k]).collect(),
        mu_star: scaled.mu_star,
    };
    let me = maxent::me_density_policy(sys, &beff, snaps.initial.cov(), snaps.terminal.cov())?;
    let gains: Vec<_> = (0..t).map(|k| &roots[k] * &me.gains[k]).collect();
    let offsets = (0..t).map(|k| &steering.u_bar[k] - &gains[k] * &steering.mu_star[k]).collect();
    let covs = (0..t).map(|k| symmetrize(&(&roots[k] * &me.covs[k] * &roots[k]))).collect();
    let policy = AffinePolicy::new(gains, offsets, covs)?;
    let controlled = bridge::controlled_process(sys, &policy, &snaps.initial)?;
    let prior = GaussianPrior::new(steering.u_bar.clone(), theta.to_vec())?;
    let reference = bridge::reference_process(sys, &prior, init_ref)?;
    Ok(PlainBridge { steering, policy, controlled, reference })
}

/// `E_ℙ[(B_k†(x_{k+1} − A_k x_k) − ū_k)(·)ᵀ]` for each step.
pub fn innovation_second_moments(sys: &LinearSystem, p: &ProcessDistribution, u_bar: &[DVector<f64>]) -> Result<Vec<DMatrix<f64>>> {
    let pinv = sys.b_pinv();
    Ok(p.innovation_moments(sys)?
        .into_iter()
        .enumerate()
        .map(|(k, (m, c))| {
            let gap = &pinv[k] * m - &u_bar[k];
            symmetrize(&(&pinv[k] * c * pinv[k].transpose() + &gap * gap.transpose()))
        })
        .collect())
}

fn check_inputs(sys: &LinearSystem, snaps: &Snapshots) -> Result<()> {
    if let Some(k) = sys.first_rank_deficient_b() {
        return Err(Error::RankDeficientB(k));
    }
    if snaps.initial.dim() != sys.state_dim() || snaps.terminal.dim() != sys.state_dim() {
        return Err(Error::dims("snapshots do not match the state dimension"));
    }
    Ok(())
}

fn average(ms: &[DMatrix<f64>]) -> DMatrix<f64> {
    let sum = ms.iter().skip(1).fold(ms[0].clone(), |acc, m| acc + m);
    symmetrize(&(sum / ms.len() as f64))
}

fn identify(sys: &LinearSystem, snaps: &Snapshots, init_ref: &Gaussian, theta0: Vec<DMatrix<f64>>, iters: usize, time_invariant: bool) -> Result<NoiseEstimate> {
    check_inputs(sys, snaps)?;
    let t = sys.horizon();
    let mut theta = theta0;
    let mut history = Vec::with_capacity(iters);
    for i in 0..iters {
        let step = (|| {
            let expanded = if time_invariant { vec![theta[0].clone(); t] } else { theta.clone() };
            let pb = plain_bridge(sys, &expanded, snaps, init_ref)?;
            let moments = innovation_second_moments(sys, &pb.controlled, &pb.steering.u_bar)?;
            Ok::<_, Error>(if time_invariant { vec![average(&moments)] } else { moments })
        })();
        theta = step.map_err(|e| e.at_iteration(i))?;
        history.push(theta.clone());
    }
    NoiseEstimate::new(theta, time_invariant, history)
}

/// Time-invariant estimate `Θ`.
pub fn sbid_estimate(sys: &LinearSystem, snaps: &Snapshots, init_ref: &Gaussian, theta0: &DMatrix<f64>, iters: usize) -> Result<NoiseEstimate> {
    if theta0.nrows() != sys.input_dim() {
        return Err(Error::dims("initial estimate does not match the input dimension"));
    }
    Gaussian::zero_mean(theta0.clone())?;
    identify(sys, snaps, init_ref, vec![theta0.clone()], iters, true)
}

/// Per-step estimates `Θ_k`.
pub fn sbtvid_estimate(sys: &LinearSystem, snaps: &Snapshots, init_ref: &Gaussian, theta0: &[DMatrix<f64>], iters: usize) -> Result<NoiseEstimate> {
    let prior = GaussianPrior::zero_mean(theta0.to_vec())?;
    if prior.horizon() != sys.horizon() || theta0[0].nrows() != sys.input_dim() {
        return Err(Error::dims("initial estimates do not match the system"));
    }
    identify(sys, snaps, init_ref, theta0.to_vec(), iters, false)
}

/// Covariances of the refined reference after `iters` bridge alternations.
pub fn generalized_bridge_estimate(sys: &LinearSystem, snaps: &Snapshots, init_ref: &Gaussian, rho0: &[DMatrix<f64>], iters: usize) -> Result<NoiseEstimate> {
    check_inputs(sys, snaps)?;
    let prior = GaussianPrior::zero_mean(rho0.to_vec())?;
    let out = bridge::alternate_sb_general(
        sys,
        snaps.initial.mean(),
        snaps.initial.cov(),
        snaps.terminal.mean(),
        snaps.terminal.cov(),
        &prior,
        init_ref,
        AlternationOptions::iterations(iters),
    )?;
    if let Some(halt) = out.deviation.halted {
        return Err(halt.error);
    }
    let history = out.priors.iter().skip(1).map(|p| p.covs().to_vec()).collect();
    let last = out.final_prior().ok_or(Error::InvalidConfig("no iterations requested".into()))?;
    NoiseEstimate::new(last.covs().to_vec(), false, history)
}

/// Dispatch over the three estimators, all started from `theta0` at every step.
pub fn estimate(method: Method, sys: &LinearSystem, snaps: &Snapshots, init_ref: &Gaussian, theta0: &DMatrix<f64>, iters: usize) -> Result<NoiseEstimate> {
    let seq = vec![theta0.clone(); sys.horizon()];
    match method {
        Method::Alg4 => generalized_bridge_estimate(sys, snaps, init_ref, &seq, iters),
        Method::Sbid => sbid_estimate(sys, snaps, init_ref, theta0, iters),
        Method::Sbtvid => sbtvid_estimate(sys, snaps, init_ref, &seq, iters),
    }
}
