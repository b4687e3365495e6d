//! Mutual-information regularized density control.
//!
//! The cost is `Σ_k E[½‖u_k‖² + KL(π_k(·|x_k) ‖ ρ_k)]` minimized jointly over
//! affine Gaussian policies `π` and Gaussian priors `ρ`, subject to Gaussian
//! boundary marginals. For a fixed prior the optimal policy is the
//! maximum-entropy density-steering policy for the effective input
//! `B_k(Σ_{ρ_k}⁻¹ + I)^{-1/2}`; for a fixed policy the optimal prior is the
//! marginal input law. Alternating the two never increases the cost.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, pd_inv_sqrt, pd_inverse, rel_frobenius, sorted_eigenvalues, symmetrize, try_sym_inverse, Gaussian};
use crate::maxent::{self, riccati_weighted, RiccatiSolution, TerminalWeightSolution};
use crate::system::{AffinePolicy, GaussianPrior, LinearSystem, MomentTrajectory};

/// Boundary-value problem: steer `𝒩(μ_ini, Σ_ini)` to `𝒩(μ_fin, Σ_fin)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProblemDoc")]
pub struct DensitySteeringProblem {
    pub system: LinearSystem,
    #[serde(serialize_with = "linalg::serde_vector::serialize")]
    pub mu_ini: DVector<f64>,
    #[serde(with = "linalg::serde_matrix")]
    pub sigma_ini: DMatrix<f64>,
    #[serde(serialize_with = "linalg::serde_vector::serialize")]
    pub mu_fin: DVector<f64>,
    #[serde(with = "linalg::serde_matrix")]
    pub sigma_fin: DMatrix<f64>,
}

#[derive(Deserialize)]
struct ProblemDoc {
    system: LinearSystem,
    #[serde(default, with = "opt_vector")]
    mu_ini: Option<DVector<f64>>,
    #[serde(with = "linalg::serde_matrix")]
    sigma_ini: DMatrix<f64>,
    #[serde(default, with = "opt_vector")]
    mu_fin: Option<DVector<f64>>,
    #[serde(with = "linalg::serde_matrix")]
    sigma_fin: DMatrix<f64>,
}

mod opt_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer};

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DVector<f64>>, D::Error> {
        Ok(Option::<Vec<f64>>::deserialize(d)?.map(DVector::from_vec))
    }
}

impl TryFrom<ProblemDoc> for DensitySteeringProblem {
    type Error = Error;
    fn try_from(doc: ProblemDoc) -> Result<Self> {
        let n = doc.system.state_dim();
        DensitySteeringProblem::new(
            doc.system,
            doc.mu_ini.unwrap_or_else(|| DVector::zeros(n)),
            doc.sigma_ini,
            doc.mu_fin.unwrap_or_else(|| DVector::zeros(n)),
            doc.sigma_fin,
        )
    }
}

impl DensitySteeringProblem {
    pub fn new(
        system: LinearSystem,
        mu_ini: DVector<f64>,
        sigma_ini: DMatrix<f64>,
        mu_fin: DVector<f64>,
        sigma_fin: DMatrix<f64>,
    ) -> Result<Self> {
        let n = system.state_dim();
        if mu_ini.len() != n || mu_fin.len() != n || sigma_ini.shape() != (n, n) || sigma_fin.shape() != (n, n) {
            return Err(Error::dims("boundary marginals do not match the state dimension"));
        }
        for s in [&sigma_ini, &sigma_fin] {
            pd_inverse(s)?;
        }
        Ok(Self {
            system,
            mu_ini,
            sigma_ini: symmetrize(&sigma_ini),
            mu_fin,
            sigma_fin: symmetrize(&sigma_fin),
        })
    }

    pub fn zero_mean(system: LinearSystem, sigma_ini: DMatrix<f64>, sigma_fin: DMatrix<f64>) -> Result<Self> {
        let n = system.state_dim();
        Self::new(system, DVector::zeros(n), sigma_ini, DVector::zeros(n), sigma_fin)
    }

    pub fn has_zero_means(&self) -> bool {
        self.mu_ini.iter().chain(self.mu_fin.iter()).all(|&v| v == 0.0)
    }

    /// Same covariances with both means set to zero.
    pub fn deviation(&self) -> Self {
        let n = self.system.state_dim();
        Self {
            mu_ini: DVector::zeros(n),
            mu_fin: DVector::zeros(n),
            ..self.clone()
        }
    }

    pub fn initial(&self) -> Gaussian {
        Gaussian::new(self.mu_ini.clone(), self.sigma_ini.clone()).expect("validated on construction")
    }

    fn centered_initial(&self) -> Gaussian {
        Gaussian::zero_mean(self.sigma_ini.clone()).expect("validated on construction")
    }

    fn check_prior(&self, prior: &GaussianPrior) -> Result<()> {
        let sys = &self.system;
        if prior.horizon() != sys.horizon() {
            return Err(Error::dims(format!("prior horizon {} vs system {}", prior.horizon(), sys.horizon())));
        }
        if (0..sys.horizon()).any(|k| prior.cov(k).nrows() != sys.b(k).ncols()) {
            return Err(Error::dims("prior dimension differs from the input dimension"));
        }
        Ok(())
    }
}

/// System with `B_k` replaced by `√ε · B_k · R_k^{-1/2}`.
///
/// Minimizing `E[½ u_kᵀR_k u_k + ε KL]` over the original system is the same
/// as the unit-weight problem on the returned one.
pub fn reduce_weighted_cost(sys: &LinearSystem, r: &[DMatrix<f64>], eps: f64) -> Result<LinearSystem> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("weight ε must be positive, got {eps}")));
    }
    if r.len() != sys.horizon() {
        return Err(Error::dims("one input weight per step is required"));
    }
    let b = sys
        .b_seq()
        .iter()
        .zip(r)
        .map(|(bk, rk)| Ok(bk * pd_inv_sqrt(rk)? * eps.sqrt()))
        .collect::<Result<Vec<_>>>()?;
    sys.with_input(b)
}

/// `B_k (Σ_{ρ_k}⁻¹ + I)^{-1/2}`.
pub fn effective_input_matrix(b: &DMatrix<f64>, sigma_rho: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if sigma_rho.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::dims("prior covariance does not match the input dimension"));
    }
    let w = pd_inverse(sigma_rho)? + DMatrix::identity(b.ncols(), b.ncols());
    Ok(b * pd_inv_sqrt(&w)?)
}

pub fn effective_inputs(sys: &LinearSystem, prior: &GaussianPrior) -> Result<Vec<DMatrix<f64>>> {
    (0..sys.horizon())
        .map(|k| effective_input_matrix(sys.b(k), prior.cov(k)))
        .collect()
}

fn prior_weights(prior: &GaussianPrior) -> Result<Vec<DMatrix<f64>>> {
    prior
        .covs()
        .iter()
        .map(|s| Ok(pd_inverse(s)? + DMatrix::identity(s.nrows(), s.nrows())))
        .collect()
}

/// `Γ_k = AᵀΓA − AᵀΓB(Σ_{ρ_k}⁻¹ + I + BᵀΓB)⁻¹BᵀΓA`, `Γ_T = F`.
pub fn riccati_mi(sys: &LinearSystem, prior: &GaussianPrior, f: &DMatrix<f64>) -> Result<RiccatiSolution> {
    if prior.horizon() != sys.horizon() {
        return Err(Error::dims("prior horizon does not match the system"));
    }
    let w = prior_weights(prior)?;
    riccati_weighted(sys, sys.b_seq(), f, |k| w[k].clone())
}

/// Terminal weight of the density-steering problem under the effective input.
pub fn mi_terminal_weight(prob: &DensitySteeringProblem, prior: &GaussianPrior) -> Result<TerminalWeightSolution> {
    prob.check_prior(prior)?;
    let beff = effective_inputs(&prob.system, prior)?;
    maxent::me_terminal_weight(&prob.system, &beff, &prob.sigma_ini, &prob.sigma_fin)
}

/// Optimal policy for a fixed zero-mean prior.
pub fn mi_policy_for_prior(prob: &DensitySteeringProblem, prior: &GaussianPrior) -> Result<AffinePolicy> {
    if !prob.has_zero_means() {
        return Err(Error::NonzeroMeans);
    }
    if !prior.is_zero_mean() {
        return Err(Error::NonzeroPriorMeans);
    }
    let tw = mi_terminal_weight(prob, prior)?;
    policy_from_weight(prob, prior, &tw)
}

fn policy_from_weight(prob: &DensitySteeringProblem, prior: &GaussianPrior, tw: &TerminalWeightSolution) -> Result<AffinePolicy> {
    use crate::error::Assumption;
    let sys = &prob.system;
    let w = prior_weights(prior)?;
    let mut gains = Vec::with_capacity(sys.horizon());
    let mut covs = Vec::with_capacity(sys.horizon());
    for k in 0..sys.horizon() {
        let b = sys.b(k);
        let q_inv = &tw.pi[k + 1];
        let h = symmetrize(&(&w[k] + b.transpose() * q_inv * b));
        let sigma = pd_inverse(&h).map_err(|_| Error::from(Assumption::NonPositivePolicyCovariance(k)))?;
        gains.push(-&sigma * b.transpose() * q_inv * sys.a(k));
        covs.push(sigma);
    }
    AffinePolicy::feedback(gains, covs)
}

/// Optimal zero-mean prior for a fixed policy: `Σ_{ρ_k} = Σ_{π_k} + P_k Σ_{x_k} P_kᵀ`.
pub fn mi_prior_for_policy(prob: &DensitySteeringProblem, policy: &AffinePolicy) -> Result<GaussianPrior> {
    if !policy.in_p0() {
        return Err(Error::PolicyClass);
    }
    let traj = prob.system.propagate_moments(policy, &prob.centered_initial())?;
    prior_from_moments(policy, &traj)
}

fn prior_from_moments(policy: &AffinePolicy, traj: &MomentTrajectory) -> Result<GaussianPrior> {
    let covs = (0..policy.horizon())
        .map(|k| {
            let p = &policy.gains[k];
            symmetrize(&(&policy.covs[k] + p * &traj.covs[k] * p.transpose()))
        })
        .collect();
    GaussianPrior::zero_mean(covs)
}

/// Per-step expected input energy and expected KL to the prior.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveTerms {
    pub energy: Vec<f64>,
    pub kl: Vec<f64>,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.energy.iter().chain(&self.kl).sum()
    }
}

/// Closed-form expectations of both cost terms along the closed-loop marginals.
pub fn objective_terms(prob: &DensitySteeringProblem, policy: &AffinePolicy, prior: &GaussianPrior) -> Result<ObjectiveTerms> {
    prob.check_prior(prior)?;
    let traj = prob.system.propagate_moments(policy, &prob.initial())?;
    let t = prob.system.horizon();
    let mut energy = Vec::with_capacity(t);
    let mut kl = Vec::with_capacity(t);
    for k in 0..t {
        let p = &policy.gains[k];
        let mean_u = p * &traj.means[k] + &policy.offsets[k];
        let spread = symmetrize(&(p * &traj.covs[k] * p.transpose()));
        energy.push(0.5 * (policy.covs[k].trace() + mean_u.norm_squared() + spread.trace()));
        let cond = Gaussian::new(mean_u, policy.covs[k].clone())?;
        let at_mean = linalg::kl_gaussian(&cond, &prior.step(k))?;
        let prec = pd_inverse(prior.cov(k))?;
        kl.push(at_mean + 0.5 * (prec * spread).trace());
    }
    Ok(ObjectiveTerms { energy, kl })
}

/// `J(π, ρ)`; `+∞` when some policy covariance is singular.
pub fn objective_j(prob: &DensitySteeringProblem, policy: &AffinePolicy, prior: &GaussianPrior) -> Result<f64> {
    Ok(objective_terms(prob, policy, prior)?.total())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlternationOptions {
    pub iters: usize,
    /// Stop once every `‖Σ_ρ⁽ⁱ⁺¹⁾ − Σ_ρ⁽ⁱ⁾‖/‖Σ_ρ⁽ⁱ⁾‖` falls below this.
    pub early_stop: Option<f64>,
}

impl Default for AlternationOptions {
    fn default() -> Self {
        Self { iters: 10, early_stop: None }
    }
}

impl AlternationOptions {
    pub fn iterations(iters: usize) -> Self {
        Self { iters, early_stop: None }
    }

    pub fn with_early_stop(mut self) -> Self {
        self.early_stop = Some(1e-10);
        self
    }
}

/// One P-step output together with the prior it was computed for.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Iterate {
    pub prior: GaussianPrior,
    pub policy: AffinePolicy,
    /// `J(π⁽ⁱ⁾, ρ⁽ⁱ⁾)`.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Halt {
    pub iteration: usize,
    pub error: Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlternationTrace {
    pub iterates: Vec<Iterate>,
    /// Prior produced by the last R-step.
    pub final_prior: Option<GaussianPrior>,
    /// `J(π⁽⁰⁾,ρ⁽⁰⁾), J(π⁽⁰⁾,ρ⁽¹⁾), J(π⁽¹⁾,ρ⁽¹⁾), …`
    pub objective_history: Vec<f64>,
    /// `‖Σ_{x_T} − Σ_fin‖_F / ‖Σ_fin‖_F` after each P-step.
    pub terminal_cov_errors: Vec<f64>,
    /// `‖μ_{x_T} − μ_fin‖` after each P-step.
    pub terminal_mean_errors: Vec<f64>,
    pub halted: Option<Halt>,
}

impl AlternationTrace {
    fn empty() -> Self {
        Self {
            iterates: Vec::new(),
            final_prior: None,
            objective_history: Vec::new(),
            terminal_cov_errors: Vec::new(),
            terminal_mean_errors: Vec::new(),
            halted: None,
        }
    }

    /// `ρ⁽⁰⁾, ρ⁽¹⁾, …` including the final R-step output.
    pub fn priors(&self) -> Vec<&GaussianPrior> {
        self.iterates.iter().map(|it| &it.prior).chain(self.final_prior.as_ref()).collect()
    }

    pub fn last_policy(&self) -> Option<&AffinePolicy> {
        self.iterates.last().map(|it| &it.policy)
    }

    /// Largest increase between consecutive half-step objective values.
    pub fn max_increase(&self) -> f64 {
        self.objective_history
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn report(&self) -> TraceReport {
        let rows = self
            .iterates
            .iter()
            .enumerate()
            .map(|(i, it)| IterationReport {
                iteration: i,
                objective_after_p_step: it.objective,
                objective_after_r_step: self.objective_history.get(2 * i + 1).copied(),
                prior_spectra: it.prior.covs().iter().map(sorted_eigenvalues).collect(),
                terminal_cov_error: self.terminal_cov_errors[i],
                terminal_mean_error: self.terminal_mean_errors[i],
            })
            .collect();
        TraceReport {
            iterations: rows,
            objective_history: self.objective_history.clone(),
            final_prior_spectra: self
                .final_prior
                .as_ref()
                .map(|p| p.covs().iter().map(sorted_eigenvalues).collect()),
            halted: self.halted.as_ref().map(|h| HaltReport {
                iteration: h.iteration,
                reason: h.error.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub objective_after_p_step: f64,
    pub objective_after_r_step: Option<f64>,
    pub prior_spectra: Vec<Vec<f64>>,
    pub terminal_cov_error: f64,
    pub terminal_mean_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HaltReport {
    pub iteration: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    pub iterations: Vec<IterationReport>,
    pub objective_history: Vec<f64>,
    pub final_prior_spectra: Option<Vec<Vec<f64>>>,
    pub halted: Option<HaltReport>,
}

pub(crate) fn terminal_errors(prob: &DensitySteeringProblem, traj: &MomentTrajectory) -> (f64, f64) {
    (
        rel_frobenius(traj.last_cov(), &prob.sigma_fin),
        (traj.last_mean() - &prob.mu_fin).norm(),
    )
}

pub(crate) fn max_relative_change(a: &GaussianPrior, b: &GaussianPrior) -> f64 {
    a.covs()
        .iter()
        .zip(b.covs())
        .map(|(x, y)| rel_frobenius(y, x))
        .fold(0.0, f64::max)
}

/// Alternating P-steps and R-steps on a zero-mean problem.
///
/// A failed hypothesis at iteration `i` stops the loop; the partial trace is
/// returned with `halted` set.
pub fn alternate_midc(
    prob: &DensitySteeringProblem,
    rho0: &GaussianPrior,
    opts: AlternationOptions,
) -> Result<AlternationTrace> {
    if !prob.has_zero_means() {
        return Err(Error::NonzeroMeans);
    }
    if !rho0.is_zero_mean() {
        return Err(Error::NonzeroPriorMeans);
    }
    prob.check_prior(rho0)?;
    let mut trace = AlternationTrace::empty();
    let mut rho = rho0.clone();
    for i in 0..opts.iters {
        let step = mi_policy_for_prior(prob, &rho).and_then(|pi| {
            let traj = prob.system.propagate_moments(&pi, &prob.centered_initial())?;
            let j_p = objective_j(prob, &pi, &rho)?;
            let next = prior_from_moments(&pi, &traj)?;
            let j_r = objective_j(prob, &pi, &next)?;
            Ok((pi, traj, j_p, next, j_r))
        });
        let (pi, traj, j_p, next, j_r) = match step {
            Ok(v) => v,
            Err(e) => {
                trace.halted = Some(Halt { iteration: i, error: e.at_iteration(i) });
                break;
            }
        };
        let (ec, em) = terminal_errors(prob, &traj);
        trace.terminal_cov_errors.push(ec);
        trace.terminal_mean_errors.push(em);
        trace.objective_history.push(j_p);
        trace.objective_history.push(j_r);
        let change = max_relative_change(&rho, &next);
        trace.iterates.push(Iterate { prior: rho, policy: pi, objective: j_p });
        rho = next;
        trace.final_prior = Some(rho.clone());
        if opts.early_stop.is_some_and(|tol| change <= tol) {
            break;
        }
    }
    Ok(trace)
}

/// Minimum-energy open-loop input steering the mean, and the resulting mean path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanSteering {
    #[serde(with = "linalg::serde_vectors")]
    pub u_bar: Vec<DVector<f64>>,
    #[serde(with = "linalg::serde_vectors")]
    pub mu_star: Vec<DVector<f64>>,
}

/// `ū_k = B̄_kᵀ Φ(T,k+1)ᵀ G_r(T,0)⁻¹ (μ_fin − Φ(T,0) μ_ini)` under input matrices `beff`.
pub fn mean_steering_with(
    sys: &LinearSystem,
    beff: &[DMatrix<f64>],
    mu_ini: &DVector<f64>,
    mu_fin: &DVector<f64>,
) -> Result<MeanSteering> {
    let t = sys.horizon();
    let gr = sys.reachability_gramian(t, 0, Some(beff))?;
    if !linalg::is_invertible(&gr) {
        return Err(Error::SingularGramian);
    }
    let gr_inv = try_sym_inverse(&gr).ok_or(Error::SingularGramian)?;
    let lambda = gr_inv * (mu_fin - sys.state_transition(t, 0)? * mu_ini);
    let mut u_bar = Vec::with_capacity(t);
    for (k, b) in beff.iter().enumerate() {
        u_bar.push(b.transpose() * sys.state_transition(t, k + 1)?.transpose() * &lambda);
    }
    let mut mu_star = Vec::with_capacity(t + 1);
    mu_star.push(mu_ini.clone());
    for k in 0..t {
        let next = sys.a(k) * &mu_star[k] + &beff[k] * &u_bar[k];
        mu_star.push(next);
    }
    Ok(MeanSteering { u_bar, mu_star })
}

pub fn mean_steering(prob: &DensitySteeringProblem) -> Result<MeanSteering> {
    if prob.has_zero_means() {
        let t = prob.system.horizon();
        let n = prob.system.state_dim();
        return Ok(MeanSteering {
            u_bar: (0..t).map(|k| DVector::zeros(prob.system.b(k).ncols())).collect(),
            mu_star: vec![DVector::zeros(n); t + 1],
        });
    }
    mean_steering_with(&prob.system, prob.system.b_seq(), &prob.mu_ini, &prob.mu_fin)
}

/// `π_k(u|x) = π̌_k(u − ū_k | x − μ*_k)` in affine form.
pub fn shift_policy(policy: &AffinePolicy, steering: &MeanSteering) -> Result<AffinePolicy> {
    let offsets = (0..policy.horizon())
        .map(|k| &policy.offsets[k] + &steering.u_bar[k] - &policy.gains[k] * &steering.mu_star[k])
        .collect();
    AffinePolicy::new(policy.gains.clone(), offsets, policy.covs.clone())
}

/// Prior with means `ū_k` and unchanged covariances.
pub fn shift_prior(prior: &GaussianPrior, steering: &MeanSteering) -> Result<GaussianPrior> {
    let means = prior.means().iter().zip(&steering.u_bar).map(|(m, u)| m + u).collect();
    prior.with_means(means)
}

/// Alternation on the deviation problem, mapped back to the original means.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralAlternation {
    pub steering: MeanSteering,
    pub deviation: AlternationTrace,
    pub policies: Vec<AffinePolicy>,
    /// Shifted priors, including the final R-step output.
    pub priors: Vec<GaussianPrior>,
    pub objective_history: Vec<f64>,
    pub terminal_cov_errors: Vec<f64>,
    pub terminal_mean_errors: Vec<f64>,
}

pub fn alternate_midc_general(
    prob: &DensitySteeringProblem,
    rho0: &GaussianPrior,
    opts: AlternationOptions,
) -> Result<GeneralAlternation> {
    let steering = mean_steering(prob)?;
    let deviation = alternate_midc(&prob.deviation(), rho0, opts)?;
    let policies = deviation
        .iterates
        .iter()
        .map(|it| shift_policy(&it.policy, &steering))
        .collect::<Result<Vec<_>>>()?;
    let priors = deviation
        .priors()
        .into_iter()
        .map(|p| shift_prior(p, &steering))
        .collect::<Result<Vec<_>>>()?;
    let mut objective_history = Vec::with_capacity(2 * policies.len());
    let mut terminal_cov_errors = Vec::with_capacity(policies.len());
    let mut terminal_mean_errors = Vec::with_capacity(policies.len());
    for (i, pi) in policies.iter().enumerate() {
        objective_history.push(objective_j(prob, pi, &priors[i])?);
        if let Some(next) = priors.get(i + 1) {
            objective_history.push(objective_j(prob, pi, next)?);
        }
        let traj = prob.system.propagate_moments(pi, &prob.initial())?;
        let (ec, em) = terminal_errors(prob, &traj);
        terminal_cov_errors.push(ec);
        terminal_mean_errors.push(em);
    }
    Ok(GeneralAlternation {
        steering,
        deviation,
        policies,
        priors,
        objective_history,
        terminal_cov_errors,
        terminal_mean_errors,
    })
}

/// Residual sequence `r_k` and the Riccati solution behind a nonzero-mean-prior policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonzeroMeanPolicyAux {
    #[serde(with = "linalg::serde_vectors")]
    pub r: Vec<DVector<f64>>,
    pub gamma: RiccatiSolution,
}

/// Optimal policy for a fixed prior with arbitrary means and terminal weight `F`.
pub fn mi_policy_nonzero_mean_prior(
    sys: &LinearSystem,
    prior: &GaussianPrior,
    f: &DMatrix<f64>,
) -> Result<(AffinePolicy, NonzeroMeanPolicyAux)> {
    if let Some(k) = sys.first_singular_a() {
        return Err(Error::SingularA(k));
    }
    if !linalg::is_invertible(f) {
        return Err(Error::SingularF);
    }
    let gamma = riccati_mi(sys, prior, f)?;
    gamma.require_feasible()?;
    let t = sys.horizon();
    let n = sys.state_dim();
    let w = prior_weights(prior)?;
    let mut r = vec![DVector::zeros(n); t + 1];
    let mut gains = vec![DMatrix::zeros(0, 0); t];
    let mut offsets = vec![DVector::zeros(0); t];
    let mut covs = vec![DMatrix::zeros(0, 0); t];
    for k in (0..t).rev() {
        let (a, b) = (sys.a(k), sys.b(k));
        let m = b.ncols();
        let g_next = gamma.pi(k + 1)?;
        let btgb = b.transpose() * g_next * b;
        let sigma = pd_inverse(&symmetrize(&(&w[k] + &btgb))).map_err(|_| Error::InfeasibleRiccati(k))?;
        let shrink = (DMatrix::identity(m, m) + prior.cov(k) * (DMatrix::identity(m, m) + &btgb))
            .try_inverse()
            .ok_or(Error::InfeasibleRiccati(k))?;
        let shrunk_mean = &shrink * prior.mean(k);
        let g_inv = try_sym_inverse(gamma.pi(k)?).ok_or(Error::InfeasibleRiccati(k))?;
        r[k] = sys.a_inverse(k)? * &r[k + 1] - g_inv * a.transpose() * g_next * b * &shrunk_mean;
        gains[k] = -&sigma * b.transpose() * g_next * a;
        offsets[k] = shrunk_mean + &sigma * b.transpose() * g_next * &r[k + 1];
        covs[k] = sigma;
    }
    let policy = AffinePolicy::new(gains, offsets, covs)?;
    Ok((policy, NonzeroMeanPolicyAux { r, gamma }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maxent::me_density_policy;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn golden_problem() -> DensitySteeringProblem {
        DensitySteeringProblem::zero_mean(LinearSystem::scalar(1.0, 1.0, 1), s(1.0), s(1.0)).unwrap()
    }

    #[test]
    fn weighted_cost_reduction_examples() {
        let sys = LinearSystem::scalar(1.0, 2.0, 2);
        let same = reduce_weighted_cost(&sys, &[s(1.0), s(1.0)], 1.0).unwrap();
        assert_eq!(same.b_seq(), sys.b_seq());
        let halved = reduce_weighted_cost(&sys, &[s(4.0), s(4.0)], 1.0).unwrap();
        assert!((halved.b(0)[(0, 0)] - 1.0).abs() < 1e-15);
        let unit = LinearSystem::scalar(1.0, 1.0, 1);
        let scaled = reduce_weighted_cost(&unit, &[s(1.0)], 4.0).unwrap();
        assert!((scaled.b(0)[(0, 0)] - 2.0).abs() < 1e-15);
        assert!(matches!(reduce_weighted_cost(&unit, &[s(0.0)], 1.0), Err(Error::NotPd(_))));
    }

    #[test]
    fn effective_input_examples() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let e = effective_input_matrix(&b, &DMatrix::identity(2, 2)).unwrap();
        assert!((e - &b / 2f64.sqrt()).norm() < 1e-14);
        let e = effective_input_matrix(&s(1.0), &s(3.0)).unwrap();
        assert!((e[(0, 0)] - 0.8660254).abs() < 1e-7);
        let e = effective_input_matrix(&b, &(DMatrix::identity(2, 2) * 1e8)).unwrap();
        assert!(rel_frobenius(&e, &b) <= 1e-4);
    }

    #[test]
    fn policy_for_unit_prior_on_golden_instance() {
        let prob = golden_problem();
        let prior = GaussianPrior::isotropic(1, 1, 1.0).unwrap();
        let pi = mi_policy_for_prior(&prob, &prior).unwrap();
        assert!(pi.in_p0());
        let traj = prob.system.propagate_moments(&pi, &Gaussian::standard(1)).unwrap();
        assert!((traj.covs[1][(0, 0)] - 1.0).abs() <= 1e-9);
        // effective input 1/√2 fed through the maximum-entropy pipeline
        let reduced = LinearSystem::scalar(1.0, 0.5f64.sqrt(), 1);
        let me = me_density_policy(&reduced, reduced.b_seq(), &s(1.0), &s(1.0)).unwrap();
        let me_traj = reduced.propagate_moments(&me, &Gaussian::standard(1)).unwrap();
        assert!(traj.max_abs_diff(&me_traj) <= 1e-9);
    }

    #[test]
    fn broad_prior_approaches_entropy_policy() {
        let sys = LinearSystem::time_invariant(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.9]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 1.0]),
            3,
        )
        .unwrap();
        let fin = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]);
        let prob = DensitySteeringProblem::zero_mean(sys.clone(), DMatrix::identity(2, 2), fin.clone()).unwrap();
        let pi = mi_policy_for_prior(&prob, &GaussianPrior::isotropic(3, 2, 1e8).unwrap()).unwrap();
        let me = me_density_policy(&sys, sys.b_seq(), &DMatrix::identity(2, 2), &fin).unwrap();
        for k in 0..3 {
            assert!(rel_frobenius(&pi.gains[k], &me.gains[k]) <= 1e-3);
            assert!(rel_frobenius(&pi.covs[k], &me.covs[k]) <= 1e-3);
        }
    }

    #[test]
    fn prior_for_policy_examples() {
        let prob = DensitySteeringProblem::zero_mean(LinearSystem::scalar(1.0, 1.0, 1), s(2.0), s(2.0)).unwrap();
        let ff = AffinePolicy::feedback(vec![s(0.0)], vec![s(0.7)]).unwrap();
        assert_eq!(mi_prior_for_policy(&prob, &ff).unwrap().cov(0), &s(0.7));
        let fb = AffinePolicy::feedback(vec![s(1.0)], vec![s(1.0)]).unwrap();
        let rho = mi_prior_for_policy(&prob, &fb).unwrap();
        assert!((rho.cov(0)[(0, 0)] - 3.0).abs() < 1e-15);
        assert!(rho.is_zero_mean());
        let offset = AffinePolicy::new(vec![s(1.0)], vec![v(1.0)], vec![s(1.0)]).unwrap();
        assert_eq!(mi_prior_for_policy(&prob, &offset), Err(Error::PolicyClass));
    }

    #[test]
    fn objective_examples() {
        let prob = golden_problem();
        let pi = AffinePolicy::feedback(vec![s(0.0)], vec![s(0.8)]).unwrap();
        let rho = GaussianPrior::isotropic(1, 1, 0.8).unwrap();
        assert!((objective_j(&prob, &pi, &rho).unwrap() - 0.4).abs() < 1e-15);
        let pi = AffinePolicy::new(vec![s(0.0)], vec![v(1.0)], vec![s(1.0)]).unwrap();
        let rho = GaussianPrior::isotropic(1, 1, 1.0).unwrap();
        assert!((objective_j(&prob, &pi, &rho).unwrap() - 1.5).abs() < 1e-15);
        let degenerate = AffinePolicy::feedback(vec![s(0.0)], vec![s(0.0)]).unwrap();
        assert_eq!(objective_j(&prob, &degenerate, &rho).unwrap(), f64::INFINITY);
    }

    /// Sampling estimate of the cost as an oracle for the closed form.
    #[test]
    fn objective_matches_monte_carlo() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        use rand_distr::StandardNormal;

        let prob = DensitySteeringProblem::new(LinearSystem::scalar(0.9, 1.2, 2), v(0.5), s(1.3), v(0.0), s(1.0)).unwrap();
        let pi = AffinePolicy::new(vec![s(-0.4), s(0.2)], vec![v(0.3), v(-0.1)], vec![s(0.6), s(0.9)]).unwrap();
        let rho = GaussianPrior::new(vec![v(0.1), v(-0.2)], vec![s(1.4), s(0.5)]).unwrap();
        let closed = objective_j(&prob, &pi, &rho).unwrap();

        let samples = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..samples {
            let mut x = 0.5 + 1.3f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let mut cost = 0.0;
            for k in 0..2 {
                let mean = pi.gains[k][(0, 0)] * x + pi.offsets[k][0];
                let var = pi.covs[k][(0, 0)];
                let u = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
                let (mr, vr) = (rho.mean(k)[0], rho.cov(k)[(0, 0)]);
                let kl = 0.5 * (var / vr + (mean - mr).powi(2) / vr - 1.0 + (vr / var).ln());
                cost += 0.5 * u * u + kl;
                x = 0.9 * x + 1.2 * u;
            }
            sum += cost;
            sum2 += cost * cost;
        }
        let mean = sum / samples as f64;
        let se = ((sum2 / samples as f64 - mean * mean) / samples as f64).sqrt();
        assert!((closed - mean).abs() <= 4.0 * se, "closed {closed} mc {mean} se {se}");
    }

    #[test]
    fn golden_alternation_descends_and_keeps_marginals() {
        let prob = golden_problem();
        let trace = alternate_midc(&prob, &GaussianPrior::isotropic(1, 1, 1.0).unwrap(), AlternationOptions::default()).unwrap();
        assert!(trace.halted.is_none());
        assert_eq!(trace.iterates.len(), 10);
        assert_eq!(trace.objective_history.len(), 20);
        assert!(trace.max_increase() <= 1e-10);
        assert!(trace.terminal_cov_errors.iter().all(|&e| e <= 1e-8));
    }

    fn expanding_problem() -> DensitySteeringProblem {
        DensitySteeringProblem::zero_mean(LinearSystem::scalar(1.0, 1.0, 2), s(1.0), s(3.0)).unwrap()
    }

    #[test]
    fn fixed_point_is_stationary() {
        let prob = expanding_problem();
        let trace = alternate_midc(&prob, &GaussianPrior::isotropic(2, 1, 1.0).unwrap(), AlternationOptions::iterations(60)).unwrap();
        let rho = trace.final_prior.unwrap();
        let again = mi_prior_for_policy(&prob, &mi_policy_for_prior(&prob, &rho).unwrap()).unwrap();
        for k in 0..2 {
            assert!((again.cov(k) - rho.cov(k)).norm() <= 1e-9);
        }
    }

    #[test]
    fn early_stop_triggers_at_convergence() {
        let prob = expanding_problem();
        let rho0 = GaussianPrior::isotropic(2, 1, 1.0).unwrap();
        let trace = alternate_midc(&prob, &rho0, AlternationOptions::iterations(500).with_early_stop()).unwrap();
        assert!(trace.iterates.len() < 50);
        assert!(trace.max_increase() <= 1e-10);
    }

    #[test]
    fn alternation_rejects_nonzero_means() {
        let prob = DensitySteeringProblem::new(LinearSystem::scalar(1.0, 1.0, 2), v(0.0), s(1.0), v(2.0), s(1.0)).unwrap();
        let rho = GaussianPrior::isotropic(2, 1, 1.0).unwrap();
        assert_eq!(alternate_midc(&prob, &rho, AlternationOptions::default()), Err(Error::NonzeroMeans));
    }

    #[test]
    fn mean_steering_examples() {
        let zero = golden_problem();
        let ms = mean_steering(&zero).unwrap();
        assert!(ms.u_bar.iter().all(|u| u[0] == 0.0));
        let prob = DensitySteeringProblem::new(LinearSystem::scalar(1.0, 1.0, 2), v(0.0), s(1.0), v(2.0), s(1.0)).unwrap();
        let ms = mean_steering(&prob).unwrap();
        assert!(ms.u_bar.iter().all(|u| (u[0] - 1.0).abs() < 1e-15));
        let path: Vec<f64> = ms.mu_star.iter().map(|m| m[0]).collect();
        assert!(path.iter().zip([0.0, 1.0, 2.0]).all(|(a, b)| (a - b).abs() < 1e-14));
        let stuck = DensitySteeringProblem::new(LinearSystem::scalar(1.0, 0.0, 2), v(0.0), s(1.0), v(2.0), s(1.0)).unwrap();
        assert_eq!(mean_steering(&stuck), Err(Error::SingularGramian));
    }

    /// The stacked input `[ū_0; …; ū_{T−1}]` must be the least-norm solution
    /// of `Σ_k Φ(T,k+1) B_k ū_k = μ_fin − Φ(T,0) μ_ini`.
    #[test]
    fn mean_steering_is_least_norm() {
        let sys = LinearSystem::new(
            vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]),
                DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.1, 1.1]),
                DMatrix::from_row_slice(2, 2, &[1.0, -0.3, 0.2, 1.0]),
            ],
            vec![DMatrix::from_row_slice(2, 1, &[0.0, 1.0]); 3],
        )
        .unwrap();
        let mu_ini = DVector::from_vec(vec![1.0, -1.0]);
        let mu_fin = DVector::from_vec(vec![0.5, 2.0]);
        let prob = DensitySteeringProblem::new(sys.clone(), mu_ini.clone(), DMatrix::identity(2, 2), mu_fin.clone(), DMatrix::identity(2, 2)).unwrap();
        let ms = mean_steering(&prob).unwrap();
        let mut stacked = DMatrix::zeros(2, 3);
        for k in 0..3 {
            let col = sys.state_transition(3, k + 1).unwrap() * sys.b(k);
            stacked.set_column(k, &col.column(0));
        }
        let rhs = &mu_fin - sys.state_transition(3, 0).unwrap() * &mu_ini;
        let oracle = linalg::pseudo_inverse(&stacked) * rhs;
        for k in 0..3 {
            assert!((ms.u_bar[k][0] - oracle[k]).abs() < 1e-10);
        }
        assert!((ms.mu_star.last().unwrap() - &mu_fin).norm() < 1e-9);
    }

    #[test]
    fn general_alternation_scalar_example() {
        let prob = DensitySteeringProblem::new(LinearSystem::scalar(1.0, 1.0, 2), v(0.0), s(1.0), v(2.0), s(1.0)).unwrap();
        let out = alternate_midc_general(&prob, &GaussianPrior::isotropic(2, 1, 1.0).unwrap(), AlternationOptions::default()).unwrap();
        for pi in &out.policies {
            let traj = prob.system.propagate_moments(pi, &prob.initial()).unwrap();
            let means: Vec<f64> = traj.means.iter().map(|m| m[0]).collect();
            assert!(means.iter().zip([0.0, 1.0, 2.0]).all(|(a, b)| (a - b).abs() < 1e-12));
            assert!((traj.covs[2][(0, 0)] - 1.0).abs() < 1e-8);
        }
        let energy: f64 = out.steering.u_bar.iter().map(|u| 0.5 * u.norm_squared()).sum();
        for (i, it) in out.deviation.iterates.iter().enumerate() {
            let total = objective_j(&prob, &out.policies[i], &out.priors[i]).unwrap();
            assert!((total - energy - it.objective).abs() <= 1e-9);
        }
        assert!(out.priors.iter().all(|p| p.means().iter().all(|m| (m[0] - 1.0).abs() < 1e-15)));
    }

    #[test]
    fn general_alternation_with_zero_means_matches_plain() {
        let prob = golden_problem();
        let rho = GaussianPrior::isotropic(1, 1, 1.0).unwrap();
        let general = alternate_midc_general(&prob, &rho, AlternationOptions::default()).unwrap();
        let plain = alternate_midc(&prob, &rho, AlternationOptions::default()).unwrap();
        for (a, b) in general.policies.iter().zip(&plain.iterates) {
            assert_eq!(a, &b.policy);
        }
    }

    #[test]
    fn nonzero_mean_prior_examples() {
        let sys = LinearSystem::scalar(1.0, 1.0, 1);
        let rho = GaussianPrior::new(vec![v(1.0)], vec![s(1.0)]).unwrap();
        let (pi, aux) = mi_policy_nonzero_mean_prior(&sys, &rho, &s(1.0)).unwrap();
        assert_eq!(aux.r[1], v(0.0));
        assert!((pi.covs[0][(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((pi.offsets[0][0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((pi.gains[0][(0, 0)] + 1.0 / 3.0).abs() < 1e-15);

        let zero = GaussianPrior::isotropic(3, 1, 2.0).unwrap();
        let sys3 = LinearSystem::scalar(1.1, 0.8, 3);
        let (pi, aux) = mi_policy_nonzero_mean_prior(&sys3, &zero, &s(0.7)).unwrap();
        assert!(aux.r.iter().all(|r| r[0] == 0.0));
        assert!(pi.offsets.iter().all(|q| q[0] == 0.0));
        assert_eq!(mi_policy_nonzero_mean_prior(&sys3, &zero, &s(0.0)).unwrap_err(), Error::SingularF);
    }

    #[test]
    fn problem_json_defaults_means_to_zero() {
        let doc = r#"{"system": {"T": 1, "n": 1, "m": 1, "A": [[1.0]], "B": [[1.0]]}, "sigma_ini": [[1.0]], "sigma_fin": [[1.0]]}"#;
        let prob: DensitySteeringProblem = serde_json::from_str(doc).unwrap();
        assert_eq!(prob, golden_problem());
        let back: DensitySteeringProblem = serde_json::from_str(&serde_json::to_string(&prob).unwrap()).unwrap();
        assert_eq!(back, prob);
    }
}
