//! Markov Gaussian path distributions and the Schrödinger bridge with
//! reference refinement.
//!
//! A path law is described by its initial marginal and one affine-Gaussian
//! transition per step. The bridge objective is `KL(ℙ ‖ ℚ^ρ) + E_ℙ[V]` with
//! `V = Σ_k ½‖B_k†(x_{k+1} − A_k x_k)‖²`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, kl_gaussian_on_support, range_projector, spd_sqrt, symmetrize, Gaussian};
use crate::maxent;
use crate::midc::{self, AlternationOptions, DensitySteeringProblem, Halt, MeanSteering};
use crate::system::{AffinePolicy, GaussianPrior, LinearSystem, MomentTrajectory};
use crate::tolerances::TOL;

/// `x_0 ~ initial`, `x_{k+1} | x_k ~ 𝒩(D_k x_k + c_k, N_k)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcessDistribution {
    pub initial: Gaussian,
    #[serde(with = "linalg::serde_matrices")]
    pub drift: Vec<DMatrix<f64>>,
    #[serde(with = "linalg::serde_vectors")]
    pub offset: Vec<DVector<f64>>,
    #[serde(with = "linalg::serde_matrices")]
    pub noise: Vec<DMatrix<f64>>,
}

impl ProcessDistribution {
    pub fn new(
        initial: Gaussian,
        drift: Vec<DMatrix<f64>>,
        offset: Vec<DVector<f64>>,
        noise: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = initial.dim();
        if drift.len() != offset.len() || drift.len() != noise.len() {
            return Err(Error::dims("process sequences have different lengths"));
        }
        for k in 0..drift.len() {
            if drift[k].shape() != (n, n) || offset[k].len() != n || noise[k].shape() != (n, n) {
                return Err(Error::dims(format!("process step {k} has inconsistent shapes")));
            }
        }
        let noise = noise
            .into_iter()
            .map(|c| Gaussian::zero_mean(c).map(|g| g.cov().clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { initial, drift, offset, noise })
    }

    pub fn horizon(&self) -> usize {
        self.drift.len()
    }

    pub fn dim(&self) -> usize {
        self.initial.dim()
    }

    pub fn marginals(&self) -> MomentTrajectory {
        let mut means = vec![self.initial.mean().clone()];
        let mut covs = vec![self.initial.cov().clone()];
        for k in 0..self.horizon() {
            let d = &self.drift[k];
            means.push(d * &means[k] + &self.offset[k]);
            covs.push(symmetrize(&(d * &covs[k] * d.transpose() + &self.noise[k])));
        }
        MomentTrajectory { means, covs }
    }

    /// Mean and covariance of `x_{k+1} − A_k x_k` for each step.
    pub fn innovation_moments(&self, sys: &LinearSystem) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        self.check_system(sys)?;
        let marg = self.marginals();
        Ok((0..self.horizon())
            .map(|k| {
                let e = &self.drift[k] - sys.a(k);
                let mean = &e * &marg.means[k] + &self.offset[k];
                let cov = symmetrize(&(&e * &marg.covs[k] * e.transpose() + &self.noise[k]));
                (mean, cov)
            })
            .collect())
    }

    fn check_system(&self, sys: &LinearSystem) -> Result<()> {
        if sys.horizon() != self.horizon() || sys.state_dim() != self.dim() {
            return Err(Error::dims("process and system disagree on horizon or dimension"));
        }
        Ok(())
    }

    /// One sample path.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Trajectory> {
        let n = self.dim();
        let draw = |rng: &mut R, root: &DMatrix<f64>| -> DVector<f64> {
            root * DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
        };
        let mut states = Vec::with_capacity(self.horizon() + 1);
        let root0 = spd_sqrt(self.initial.cov())?;
        states.push(self.initial.mean() + draw(rng, &root0));
        for k in 0..self.horizon() {
            let root = spd_sqrt(&self.noise[k])?;
            let next = &self.drift[k] * &states[k] + &self.offset[k] + draw(rng, &root);
            states.push(next);
        }
        Ok(Trajectory { states })
    }
}

/// A point of the path space `(ℝⁿ)^{T+1}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    #[serde(with = "linalg::serde_vectors")]
    pub states: Vec<DVector<f64>>,
}

/// Uncontrolled process driven by noise drawn from the prior.
pub fn reference_process(sys: &LinearSystem, prior: &GaussianPrior, init: &Gaussian) -> Result<ProcessDistribution> {
    if prior.horizon() != sys.horizon() || init.dim() != sys.state_dim() {
        return Err(Error::dims("prior or initial law does not match the system"));
    }
    let mut offset = Vec::with_capacity(sys.horizon());
    let mut noise = Vec::with_capacity(sys.horizon());
    for k in 0..sys.horizon() {
        let b = sys.b(k);
        if prior.cov(k).nrows() != b.ncols() {
            return Err(Error::dims(format!("prior step {k} does not match B_{k}")));
        }
        offset.push(b * prior.mean(k));
        noise.push(symmetrize(&(b * prior.cov(k) * b.transpose())));
    }
    ProcessDistribution::new(init.clone(), sys.a_seq().to_vec(), offset, noise)
}

/// Path law of the closed loop under `policy`.
pub fn controlled_process(sys: &LinearSystem, policy: &AffinePolicy, init: &Gaussian) -> Result<ProcessDistribution> {
    if policy.horizon() != sys.horizon() || init.dim() != sys.state_dim() {
        return Err(Error::dims("policy or initial law does not match the system"));
    }
    let mut drift = Vec::with_capacity(sys.horizon());
    let mut offset = Vec::with_capacity(sys.horizon());
    let mut noise = Vec::with_capacity(sys.horizon());
    for k in 0..sys.horizon() {
        let b = sys.b(k);
        if policy.gains[k].shape() != (b.ncols(), sys.state_dim()) {
            return Err(Error::dims(format!("policy step {k} does not match B_{k}")));
        }
        drift.push(sys.a(k) + b * &policy.gains[k]);
        offset.push(b * &policy.offsets[k]);
        noise.push(symmetrize(&(b * &policy.covs[k] * b.transpose())));
    }
    ProcessDistribution::new(init.clone(), drift, offset, noise)
}

/// `V = Σ_k ½‖B_k†(x_{k+1} − A_k x_k)‖²`.
pub fn potential_v(sys: &LinearSystem, traj: &Trajectory) -> Result<f64> {
    if traj.states.len() != sys.horizon() + 1 {
        return Err(Error::dims(format!(
            "trajectory has {} states, horizon needs {}",
            traj.states.len(),
            sys.horizon() + 1
        )));
    }
    let pinv = sys.b_pinv();
    Ok((0..sys.horizon())
        .map(|k| 0.5 * (&pinv[k] * (&traj.states[k + 1] - sys.a(k) * &traj.states[k])).norm_squared())
        .sum())
}

/// `E_ℙ[V]` in closed form.
pub fn expected_potential(sys: &LinearSystem, p: &ProcessDistribution) -> Result<f64> {
    let pinv = sys.b_pinv();
    Ok(p.innovation_moments(sys)?
        .iter()
        .enumerate()
        .map(|(k, (m, c))| {
            let bm = &pinv[k] * m;
            0.5 * (bm.norm_squared() + (&pinv[k] * c * pinv[k].transpose()).trace())
        })
        .sum())
}

/// `KL(ℙ ‖ ℚ)` by the chain rule over Markov transitions; `+∞` when some
/// transition of `ℙ` leaves the support of the matching transition of `ℚ`.
pub fn kl_process(p: &ProcessDistribution, q: &ProcessDistribution) -> Result<f64> {
    if p.horizon() != q.horizon() || p.dim() != q.dim() {
        return Err(Error::dims("processes differ in horizon or dimension"));
    }
    let n = p.dim();
    let mut total = kl_gaussian_on_support(&p.initial, &q.initial)?;
    if total.is_infinite() {
        return Ok(total);
    }
    let marg = p.marginals();
    for k in 0..p.horizon() {
        let dd = &p.drift[k] - &q.drift[k];
        let mean_gap = &dd * &marg.means[k] + &p.offset[k] - &q.offset[k];
        let spread = symmetrize(&(&dd * &marg.covs[k] * dd.transpose()));
        let leak = DMatrix::identity(n, n) - range_projector(&q.noise[k]);
        if (&leak * &spread * &leak).norm() > TOL.membership * spread.norm().max(1.0) {
            return Ok(f64::INFINITY);
        }
        let cond_p = Gaussian::new(mean_gap, p.noise[k].clone())?;
        let cond_q = Gaussian::zero_mean(q.noise[k].clone())?;
        let at_mean = kl_gaussian_on_support(&cond_p, &cond_q)?;
        if at_mean.is_infinite() {
            return Ok(f64::INFINITY);
        }
        let q_pinv = linalg::pseudo_inverse(&q.noise[k]);
        total += at_mean + 0.5 * (q_pinv * spread).trace();
    }
    Ok(total)
}

/// `KL(ℙ ‖ ℚ) + E_ℙ[V]`.
pub fn sb_objective(p: &ProcessDistribution, q: &ProcessDistribution, sys: &LinearSystem) -> Result<f64> {
    let kl = kl_process(p, q)?;
    if kl.is_infinite() {
        return Ok(kl);
    }
    Ok(kl + expected_potential(sys, p)?)
}

/// Iterates of the SB-step / RR-step alternation.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeTrace {
    /// `ρ⁽⁰⁾, ρ⁽¹⁾, …` including the last RR-step output.
    pub priors: Vec<GaussianPrior>,
    /// Policies generating each controlled process.
    pub policies: Vec<AffinePolicy>,
    /// `ℙ⁽ⁱ⁾`.
    pub controlled: Vec<ProcessDistribution>,
    /// `ℚ⁽ⁱ⁾`, one per prior.
    pub references: Vec<ProcessDistribution>,
    /// Bridge objective after each half-step.
    pub objective_history: Vec<f64>,
    pub terminal_cov_errors: Vec<f64>,
    pub terminal_mean_errors: Vec<f64>,
    pub halted: Option<Halt>,
}

impl BridgeTrace {
    pub fn max_increase(&self) -> f64 {
        self.objective_history
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn final_prior(&self) -> Option<&GaussianPrior> {
        if self.priors.len() > self.controlled.len() {
            self.priors.last()
        } else {
            None
        }
    }
}

/// Noise law matching the innovations of `ℙ` through `B_k†`.
pub fn refine_reference(sys: &LinearSystem, p: &ProcessDistribution) -> Result<GaussianPrior> {
    let pinv = sys.b_pinv();
    let mut means = Vec::with_capacity(sys.horizon());
    let mut covs = Vec::with_capacity(sys.horizon());
    for (k, (m, c)) in p.innovation_moments(sys)?.into_iter().enumerate() {
        means.push(&pinv[k] * m);
        covs.push(symmetrize(&(&pinv[k] * c * pinv[k].transpose())));
    }
    GaussianPrior::new(means, covs)
}

/// Optimal bridge for reference `ℚ^ρ`, built from the maximum-entropy
/// density-steering policy under the effective input `B_k(Σ_{ρ_k}⁻¹+I)^{-1/2}`.
pub fn bridge_step(
    sys: &LinearSystem,
    prior: &GaussianPrior,
    sigma_ini: &DMatrix<f64>,
    sigma_fin: &DMatrix<f64>,
) -> Result<ProcessDistribution> {
    let beff = midc::effective_inputs(sys, prior)?;
    let me = maxent::me_density_policy(sys, &beff, sigma_ini, sigma_fin)?;
    let drift = (0..sys.horizon()).map(|k| sys.a(k) + &beff[k] * &me.gains[k]).collect();
    let noise = (0..sys.horizon())
        .map(|k| symmetrize(&(&beff[k] * &me.covs[k] * beff[k].transpose())))
        .collect();
    let offset = vec![DVector::zeros(sys.state_dim()); sys.horizon()];
    ProcessDistribution::new(Gaussian::zero_mean(sigma_ini.clone())?, drift, offset, noise)
}

fn check_full_rank(sys: &LinearSystem) -> Result<()> {
    match sys.first_rank_deficient_b() {
        Some(k) => Err(Error::RankDeficientB(k)),
        None => Ok(()),
    }
}

/// Alternating SB-steps and RR-steps for zero-mean marginals.
pub fn alternate_sb(
    sys: &LinearSystem,
    sigma_ini: &DMatrix<f64>,
    sigma_fin: &DMatrix<f64>,
    rho0: &GaussianPrior,
    init_ref: &Gaussian,
    opts: AlternationOptions,
) -> Result<BridgeTrace> {
    check_full_rank(sys)?;
    if !rho0.is_zero_mean() {
        return Err(Error::NonzeroPriorMeans);
    }
    let prob = DensitySteeringProblem::zero_mean(sys.clone(), sigma_ini.clone(), sigma_fin.clone())?;
    let mut trace = BridgeTrace {
        priors: vec![rho0.clone()],
        policies: Vec::new(),
        controlled: Vec::new(),
        references: vec![reference_process(sys, rho0, init_ref)?],
        objective_history: Vec::new(),
        terminal_cov_errors: Vec::new(),
        terminal_mean_errors: Vec::new(),
        halted: None,
    };
    for i in 0..opts.iters {
        let rho = trace.priors[i].clone();
        let q = trace.references[i].clone();
        let step = (|| {
            let p = bridge_step(sys, &rho, sigma_ini, sigma_fin)?;
            let pi = midc::mi_policy_for_prior(&prob, &rho)?;
            let s_sb = sb_objective(&p, &q, sys)?;
            if s_sb.is_infinite() {
                return Err(Error::InfiniteObjective);
            }
            let next = refine_reference(sys, &p)?;
            let next = GaussianPrior::zero_mean(next.covs().to_vec())?;
            let q_next = reference_process(sys, &next, init_ref)?;
            let s_rr = sb_objective(&p, &q_next, sys)?;
            Ok((p, pi, s_sb, next, q_next, s_rr))
        })();
        let (p, pi, s_sb, next, q_next, s_rr) = match step {
            Ok(v) => v,
            Err(e) => {
                trace.halted = Some(Halt { iteration: i, error: e.at_iteration(i) });
                break;
            }
        };
        let marg = p.marginals();
        let (ec, em) = midc::terminal_errors(&prob, &marg);
        trace.terminal_cov_errors.push(ec);
        trace.terminal_mean_errors.push(em);
        trace.objective_history.push(s_sb);
        trace.objective_history.push(s_rr);
        let change = midc::max_relative_change(&rho, &next);
        trace.controlled.push(p);
        trace.policies.push(pi);
        trace.priors.push(next);
        trace.references.push(q_next);
        if opts.early_stop.is_some_and(|tol| change <= tol) {
            break;
        }
    }
    Ok(trace)
}

/// Shift of a zero-mean controlled process onto the mean path `μ*`.
pub fn shift_controlled(p: &ProcessDistribution, steering: &MeanSteering, mu_ini: &DVector<f64>) -> Result<ProcessDistribution> {
    let offset = (0..p.horizon())
        .map(|k| &p.offset[k] + &steering.mu_star[k + 1] - &p.drift[k] * &steering.mu_star[k])
        .collect();
    let initial = Gaussian::new(p.initial.mean() + mu_ini, p.initial.cov().clone())?;
    ProcessDistribution::new(initial, p.drift.clone(), offset, p.noise.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralBridge {
    pub steering: MeanSteering,
    pub deviation: BridgeTrace,
    pub priors: Vec<GaussianPrior>,
    pub controlled: Vec<ProcessDistribution>,
    pub references: Vec<ProcessDistribution>,
    pub objective_history: Vec<f64>,
    pub terminal_cov_errors: Vec<f64>,
    pub terminal_mean_errors: Vec<f64>,
}

impl GeneralBridge {
    pub fn final_prior(&self) -> Option<&GaussianPrior> {
        if self.priors.len() > self.controlled.len() {
            self.priors.last()
        } else {
            None
        }
    }
}

/// Bridge alternation for marginals with nonzero means: the zero-mean
/// deviation problem is solved and shifted by the minimum-energy mean path.
#[allow(clippy::too_many_arguments)]
pub fn alternate_sb_general(
    sys: &LinearSystem,
    mu_ini: &DVector<f64>,
    sigma_ini: &DMatrix<f64>,
    mu_fin: &DVector<f64>,
    sigma_fin: &DMatrix<f64>,
    rho0: &GaussianPrior,
    init_ref: &Gaussian,
    opts: AlternationOptions,
) -> Result<GeneralBridge> {
    check_full_rank(sys)?;
    let prob = DensitySteeringProblem::new(sys.clone(), mu_ini.clone(), sigma_ini.clone(), mu_fin.clone(), sigma_fin.clone())?;
    let steering = midc::mean_steering(&prob)?;
    let centered_ref = Gaussian::new(init_ref.mean() - mu_ini, init_ref.cov().clone())?;
    let deviation = alternate_sb(sys, sigma_ini, sigma_fin, rho0, &centered_ref, opts)?;
    let priors = deviation
        .priors
        .iter()
        .map(|p| midc::shift_prior(p, &steering))
        .collect::<Result<Vec<_>>>()?;
    let controlled = deviation
        .controlled
        .iter()
        .map(|p| shift_controlled(p, &steering, mu_ini))
        .collect::<Result<Vec<_>>>()?;
    let references = priors
        .iter()
        .map(|p| reference_process(sys, p, init_ref))
        .collect::<Result<Vec<_>>>()?;
    let mut objective_history = Vec::with_capacity(2 * controlled.len());
    let mut terminal_cov_errors = Vec::with_capacity(controlled.len());
    let mut terminal_mean_errors = Vec::with_capacity(controlled.len());
    for (i, p) in controlled.iter().enumerate() {
        objective_history.push(sb_objective(p, &references[i], sys)?);
        if let Some(next) = references.get(i + 1) {
            objective_history.push(sb_objective(p, next, sys)?);
        }
        let (ec, em) = midc::terminal_errors(&prob, &p.marginals());
        terminal_cov_errors.push(ec);
        terminal_mean_errors.push(em);
    }
    Ok(GeneralBridge {
        steering,
        deviation,
        priors,
        controlled,
        references,
        objective_history,
        terminal_cov_errors,
        terminal_mean_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midc::{alternate_midc, mi_policy_for_prior, objective_terms};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn scalar_process(drift: f64, offset: f64, noise: f64) -> ProcessDistribution {
        ProcessDistribution::new(Gaussian::standard(1), vec![s(drift)], vec![v(offset)], vec![s(noise)]).unwrap()
    }

    #[test]
    fn reference_process_examples() {
        let sys = LinearSystem::scalar(1.0, 2.0, 1);
        let rho = GaussianPrior::isotropic(1, 1, 1.0).unwrap();
        let init = Gaussian::new(v(0.3), s(2.0)).unwrap();
        let q = reference_process(&sys, &rho, &init).unwrap();
        assert_eq!(q.noise[0], s(4.0));
        assert_eq!(q.offset[0], v(0.0));
        assert_eq!(q.initial, init);
    }

    #[test]
    fn controlled_process_examples() {
        let sys = LinearSystem::scalar(1.0, 1.0, 1);
        let golden = (5f64.sqrt() - 1.0) / 2.0;
        let pi = AffinePolicy::feedback(vec![s(golden - 1.0)], vec![s(golden)]).unwrap();
        let p = controlled_process(&sys, &pi, &Gaussian::standard(1)).unwrap();
        assert!((p.drift[0][(0, 0)] - 0.6180340).abs() < 1e-7);
        assert!((p.noise[0][(0, 0)] - 0.6180340).abs() < 1e-7);

        let ff = AffinePolicy::feedback(vec![s(0.0)], vec![s(0.4)]).unwrap();
        let rho = GaussianPrior::isotropic(1, 1, 0.4).unwrap();
        assert_eq!(
            controlled_process(&sys, &ff, &Gaussian::standard(1)).unwrap(),
            reference_process(&sys, &rho, &Gaussian::standard(1)).unwrap()
        );
    }

    #[test]
    fn controlled_marginals_match_moment_recursion() {
        let sys = LinearSystem::new(
            vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.1, 0.9]); 3],
            vec![DMatrix::from_row_slice(2, 1, &[0.3, 1.0]); 3],
        )
        .unwrap();
        let pi = AffinePolicy::new(
            vec![DMatrix::from_row_slice(1, 2, &[-0.5, 0.2]); 3],
            vec![v(0.3), v(-0.2), v(0.0)],
            vec![s(0.5), s(0.2), s(0.9)],
        )
        .unwrap();
        let init = Gaussian::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
        let from_process = controlled_process(&sys, &pi, &init).unwrap().marginals();
        let direct = sys.propagate_moments(&pi, &init).unwrap();
        assert!(from_process.max_abs_diff(&direct) <= 1e-12);
    }

    #[test]
    fn potential_examples() {
        let sys = LinearSystem::scalar(1.0, 2.0, 1);
        let still = Trajectory { states: vec![v(1.0), v(1.0)] };
        assert_eq!(potential_v(&sys, &still).unwrap(), 0.0);
        let step = Trajectory { states: vec![v(0.0), v(1.0)] };
        assert!((potential_v(&sys, &step).unwrap() - 0.125).abs() < 1e-15);
        let id = LinearSystem::time_invariant(DMatrix::identity(2, 2) * 0.5, DMatrix::identity(2, 2), 1).unwrap();
        let path = Trajectory { states: vec![DVector::from_vec(vec![2.0, 0.0]), DVector::from_vec(vec![1.0, 3.0])] };
        assert!((potential_v(&id, &path).unwrap() - 4.5).abs() < 1e-15);
    }

    #[test]
    fn expected_potential_zero_for_reference_drift() {
        let sys = LinearSystem::scalar(0.7, 1.0, 2);
        let p = ProcessDistribution::new(Gaussian::standard(1), vec![s(0.7); 2], vec![v(0.0); 2], vec![s(0.0); 2]).unwrap();
        assert_eq!(expected_potential(&sys, &p).unwrap(), 0.0);
    }

    #[test]
    fn expected_potential_matches_sampling() {
        let sys = LinearSystem::time_invariant(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 1.1]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            3,
        )
        .unwrap();
        let p = ProcessDistribution::new(
            Gaussian::new(DVector::from_vec(vec![0.5, -0.5]), DMatrix::identity(2, 2)).unwrap(),
            vec![DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.2, 0.8]); 3],
            vec![DVector::from_vec(vec![0.1, 0.3]); 3],
            vec![DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]); 3],
        )
        .unwrap();
        let closed = expected_potential(&sys, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let samples = 1_000_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..samples {
            let val = potential_v(&sys, &p.sample(&mut rng).unwrap()).unwrap();
            sum += val;
            sum2 += val * val;
        }
        let mean = sum / samples as f64;
        let se = ((sum2 / samples as f64 - mean * mean) / samples as f64).sqrt();
        assert!((closed - mean).abs() <= 4.0 * se, "closed {closed} mc {mean} se {se}");
    }

    #[test]
    fn kl_process_examples() {
        let p = scalar_process(0.0, 0.0, 1.0);
        assert_eq!(kl_process(&p, &p).unwrap(), 0.0);
        let q = scalar_process(0.0, 1.0, 1.0);
        assert!((kl_process(&p, &q).unwrap() - 0.5).abs() < 1e-15);
        // different drifts on a degenerate reference noise leave the support
        let degenerate = ProcessDistribution::new(
            Gaussian::standard(2),
            vec![DMatrix::identity(2, 2)],
            vec![DVector::zeros(2)],
            vec![DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))],
        )
        .unwrap();
        let tilted = ProcessDistribution::new(
            Gaussian::standard(2),
            vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 1.0])],
            vec![DVector::zeros(2)],
            vec![DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))],
        )
        .unwrap();
        assert_eq!(kl_process(&tilted, &degenerate).unwrap(), f64::INFINITY);
        let sys = LinearSystem::time_invariant(DMatrix::identity(2, 2), DMatrix::identity(2, 2), 1).unwrap();
        assert_eq!(sb_objective(&tilted, &degenerate, &sys).unwrap(), f64::INFINITY);
    }

    #[test]
    fn bridge_identities_at_identity_input() {
        let sys = LinearSystem::time_invariant(DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.2, 0.9]), DMatrix::identity(2, 2), 3).unwrap();
        let prob = DensitySteeringProblem::zero_mean(sys.clone(), DMatrix::identity(2, 2), DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let rho = GaussianPrior::zero_mean(vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.6]); 3]).unwrap();
        let pi = mi_policy_for_prior(&prob, &rho).unwrap();
        let init_ref = Gaussian::zero_mean(DMatrix::identity(2, 2) * 1.5).unwrap();
        let p = controlled_process(&sys, &pi, &prob.initial()).unwrap();
        let q = reference_process(&sys, &rho, &init_ref).unwrap();
        let terms = objective_terms(&prob, &pi, &rho).unwrap();
        let kl0 = linalg::kl_gaussian(&prob.initial(), &init_ref).unwrap();
        let energy: f64 = terms.energy.iter().sum();
        let kl: f64 = terms.kl.iter().sum();
        assert!((kl_process(&p, &q).unwrap() - kl0 - kl).abs() <= 1e-9);
        assert!((expected_potential(&sys, &p).unwrap() - energy).abs() <= 1e-9);
        assert!((sb_objective(&p, &q, &sys).unwrap() - kl0 - terms.total()).abs() <= 1e-9);
    }

    fn golden_setup() -> (LinearSystem, DMatrix<f64>, DMatrix<f64>) {
        (LinearSystem::scalar(1.0, 1.0, 1), s(1.0), s(1.0))
    }

    #[test]
    fn bridge_alternation_matches_control_alternation() {
        let (sys, ini, fin) = golden_setup();
        let rho0 = GaussianPrior::isotropic(1, 1, 1.0).unwrap();
        let bridge = alternate_sb(&sys, &ini, &fin, &rho0, &Gaussian::standard(1), AlternationOptions::default()).unwrap();
        let prob = DensitySteeringProblem::zero_mean(sys, ini, fin).unwrap();
        let control = alternate_midc(&prob, &rho0, AlternationOptions::default()).unwrap();
        for (a, b) in bridge.priors.iter().zip(control.priors()) {
            assert!((a.cov(0) - b.cov(0)).amax() <= 1e-12);
        }
        assert!(bridge.max_increase() <= 1e-10);
        for p in &bridge.controlled {
            let m = p.marginals();
            assert!((m.covs[0][(0, 0)] - 1.0).abs() <= 1e-8);
            assert!((m.covs[1][(0, 0)] - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn reference_initial_law_does_not_move_iterates() {
        let sys = LinearSystem::scalar(1.0, 1.0, 2);
        let rho0 = GaussianPrior::isotropic(2, 1, 1.0).unwrap();
        let a = alternate_sb(&sys, &s(1.0), &s(3.0), &rho0, &Gaussian::standard(1), AlternationOptions::default()).unwrap();
        let other = Gaussian::new(v(2.0), s(0.3)).unwrap();
        let b = alternate_sb(&sys, &s(1.0), &s(3.0), &rho0, &other, AlternationOptions::default()).unwrap();
        assert_eq!(a.priors, b.priors);
        assert_eq!(a.policies, b.policies);
        let shift = a.objective_history[0] - b.objective_history[0];
        for (x, y) in a.objective_history.iter().zip(&b.objective_history) {
            assert!((x - y - shift).abs() <= 1e-9);
        }
    }

    #[test]
    fn refined_reference_satisfies_first_order_condition() {
        let sys = LinearSystem::time_invariant(
            DMatrix::from_row_slice(3, 3, &[1.0, 0.1, 0.0, 0.0, 0.9, 0.2, 0.1, 0.0, 1.05]),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.2, 1.0, 0.0, 0.5]),
            4,
        )
        .unwrap();
        let ini = DMatrix::identity(3, 3);
        let fin = DMatrix::from_row_slice(3, 3, &[2.0, 0.2, 0.0, 0.2, 1.5, 0.1, 0.0, 0.1, 1.2]);
        let rho0 = GaussianPrior::isotropic(4, 2, 1.0).unwrap();
        let trace = alternate_sb(&sys, &ini, &fin, &rho0, &Gaussian::standard(3), AlternationOptions::iterations(4)).unwrap();
        assert!(trace.halted.is_none());
        for (i, pi) in trace.policies.iter().enumerate() {
            let marg = trace.controlled[i].marginals();
            let next = &trace.priors[i + 1];
            for k in 0..4 {
                let b = sys.b(k);
                let lhs = b * next.cov(k) * b.transpose();
                let p = &pi.gains[k];
                let rhs = b * (p * &marg.covs[k] * p.transpose() + &pi.covs[k]) * b.transpose();
                assert!((lhs - rhs).amax() <= 1e-9);
            }
        }
    }

    #[test]
    fn general_bridge_scalar_example() {
        let sys = LinearSystem::scalar(1.0, 1.0, 2);
        let rho0 = GaussianPrior::isotropic(2, 1, 1.0).unwrap();
        let out = alternate_sb_general(&sys, &v(0.0), &s(1.0), &v(2.0), &s(1.0), &rho0, &Gaussian::standard(1), AlternationOptions::default()).unwrap();
        for p in &out.controlled {
            let means: Vec<f64> = p.marginals().means.iter().map(|m| m[0]).collect();
            assert!(means.iter().zip([0.0, 1.0, 2.0]).all(|(a, b)| (a - b).abs() <= 1e-8));
        }
        assert!(out.priors.iter().all(|p| p.means().iter().all(|m| (m[0] - 1.0).abs() < 1e-12)));
        assert!(out.objective_history.windows(2).all(|w| w[1] <= w[0] + 1e-10));

        let zero = alternate_sb_general(&sys, &v(0.0), &s(1.0), &v(0.0), &s(3.0), &rho0, &Gaussian::standard(1), AlternationOptions::default()).unwrap();
        let plain = alternate_sb(&sys, &s(1.0), &s(3.0), &rho0, &Gaussian::standard(1), AlternationOptions::default()).unwrap();
        assert_eq!(zero.priors, plain.priors);
        assert_eq!(zero.controlled, plain.controlled);
    }

    #[test]
    fn rank_deficient_input_is_rejected() {
        let sys = LinearSystem::time_invariant(DMatrix::identity(2, 2), DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]), 2).unwrap();
        let rho0 = GaussianPrior::isotropic(2, 2, 1.0).unwrap();
        let err = alternate_sb(&sys, &DMatrix::identity(2, 2), &DMatrix::identity(2, 2), &rho0, &Gaussian::standard(2), AlternationOptions::default());
        assert_eq!(err.unwrap_err(), Error::RankDeficientB(0));
    }

    /// Regressing `x_{k+2}` on `(x_{k+1}, x_k)` over sampled paths: the
    /// coefficient on `x_k` vanishes for a Markov law.
    #[test]
    fn sampled_bridge_paths_are_markov() {
        let sys = LinearSystem::scalar(1.0, 1.0, 3);
        let rho0 = GaussianPrior::isotropic(3, 1, 1.0).unwrap();
        let trace = alternate_sb(&sys, &s(1.0), &s(3.0), &rho0, &Gaussian::standard(1), AlternationOptions::iterations(3)).unwrap();
        assert!(trace.halted.is_none(), "{:?}", trace.halted);
        let p = trace.controlled.last().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples = 200_000;
        let mut xtx = DMatrix::<f64>::zeros(2, 2);
        let mut xty = DVector::<f64>::zeros(2);
        let mut rss = 0.0;
        let mut rows = Vec::with_capacity(samples);
        for _ in 0..samples {
            let path = p.sample(&mut rng).unwrap();
            let row = DVector::from_vec(vec![path.states[1][0], path.states[0][0]]);
            let y = path.states[2][0];
            xtx += &row * row.transpose();
            xty += &row * y;
            rows.push((row, y));
        }
        let beta = xtx.clone().try_inverse().unwrap() * xty;
        for (row, y) in &rows {
            rss += (y - row.dot(&beta)).powi(2);
        }
        let sigma2 = rss / (samples as f64 - 2.0);
        let se = (sigma2 * xtx.try_inverse().unwrap()[(1, 1)]).sqrt();
        assert!(beta[1].abs() <= 4.0 * se, "lag-2 coefficient {} se {}", beta[1], se);
    }
}
