//! Maximum-entropy optimal control and maximum-entropy density steering.
//!
//! The stage cost is `½‖u‖² − H(π_k(·|x))` with a quadratic terminal weight
//! `½ x_Tᵀ F x_T`. For density steering the terminal weight is chosen so that
//! the closed loop carries `𝒩(0, Σ_ini)` to `𝒩(0, Σ_fin)`; it is obtained from
//! a forward Lyapunov recursion started at a closed-form `Q_0`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Assumption, Error, Result};
use crate::linalg::{self, is_invertible, min_eigenvalue, pd_inv_sqrt, spd_sqrt, symmetrize, try_sym_inverse};
use crate::system::{AffinePolicy, LinearSystem};
use crate::tolerances::TOL;

/// Backward Riccati solution `Π_0..Π_T`.
///
/// Entries before the first infeasible step are `None`: the recursion halts
/// there.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiccatiSolution {
    #[serde(serialize_with = "serialize_opt_matrices")]
    pi: Vec<Option<DMatrix<f64>>>,
    pub feasible: Vec<bool>,
    pub first_infeasible: Option<usize>,
}

fn serialize_opt_matrices<S: serde::Serializer>(
    v: &[Option<DMatrix<f64>>],
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for m in v {
        seq.serialize_element(&m.as_ref().map(linalg::matrix_to_rows))?;
    }
    seq.end()
}

fn serialize_opt_sequence<S: serde::Serializer>(
    v: &Option<Vec<DMatrix<f64>>>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(ms) => linalg::serde_matrices::serialize(ms, s),
        None => s.serialize_none(),
    }
}

impl RiccatiSolution {
    pub fn is_feasible(&self) -> bool {
        self.first_infeasible.is_none()
    }

    pub fn require_feasible(&self) -> Result<()> {
        match self.first_infeasible {
            Some(k) => Err(Error::InfeasibleRiccati(k)),
            None => Ok(()),
        }
    }

    /// `Π_k`; fails when the recursion halted above `k`.
    pub fn pi(&self, k: usize) -> Result<&DMatrix<f64>> {
        self.pi[k]
            .as_ref()
            .ok_or(Error::InfeasibleRiccati(self.first_infeasible.unwrap_or(k)))
    }

    pub fn terminal(&self) -> &DMatrix<f64> {
        self.pi.last().and_then(Option::as_ref).expect("terminal weight is always set")
    }

    pub fn horizon(&self) -> usize {
        self.pi.len() - 1
    }
}

/// `Π_k = AᵀΠA − AᵀΠB̄(W_k + B̄ᵀΠB̄)⁻¹B̄ᵀΠA` with `Π_T = F`.
///
/// `W_k = I` gives the maximum-entropy recursion; `W_k = Σ_{ρ_k}⁻¹ + I` gives
/// the mutual-information one.
pub(crate) fn riccati_weighted(
    sys: &LinearSystem,
    beff: &[DMatrix<f64>],
    f: &DMatrix<f64>,
    weight: impl Fn(usize) -> DMatrix<f64>,
) -> Result<RiccatiSolution> {
    let t = sys.horizon();
    let n = sys.state_dim();
    if beff.len() != t || beff.iter().any(|b| b.nrows() != n) {
        return Err(Error::dims("effective input sequence does not match the system"));
    }
    if f.shape() != (n, n) {
        return Err(Error::dims(format!("terminal weight is {:?}, state dimension {n}", f.shape())));
    }
    linalg::check_symmetric(f)?;
    let mut pi = vec![None; t + 1];
    let mut feasible = vec![false; t];
    pi[t] = Some(symmetrize(f));
    let mut first_infeasible = None;
    for k in (0..t).rev() {
        let next = pi[k + 1].as_ref().expect("filled on the previous step");
        let (a, b) = (sys.a(k), &beff[k]);
        let btp = b.transpose() * next;
        let h = symmetrize(&(weight(k) + &btp * b));
        if !(min_eigenvalue(&h) > TOL.pd) {
            first_infeasible = Some(k);
            break;
        }
        let h_inv = try_sym_inverse(&h).ok_or(Error::InfeasibleRiccati(k))?;
        let atp = a.transpose() * next;
        let cur = &atp * a - &atp * b * h_inv * &btp * a;
        pi[k] = Some(symmetrize(&cur));
        feasible[k] = true;
    }
    Ok(RiccatiSolution { pi, feasible, first_infeasible })
}

/// Maximum-entropy Riccati recursion under input matrices `beff`.
pub fn riccati_me(sys: &LinearSystem, beff: &[DMatrix<f64>], f: &DMatrix<f64>) -> Result<RiccatiSolution> {
    riccati_weighted(sys, beff, f, |k| DMatrix::identity(beff[k].ncols(), beff[k].ncols()))
}

/// `Σ_k = (I + B̄ᵀΠ_{k+1}B̄)⁻¹`, `P_k = −Σ_k B̄ᵀΠ_{k+1}A_k`.
pub fn me_policy(sys: &LinearSystem, beff: &[DMatrix<f64>], ricc: &RiccatiSolution) -> Result<AffinePolicy> {
    ricc.require_feasible()?;
    let t = sys.horizon();
    let mut gains = Vec::with_capacity(t);
    let mut covs = Vec::with_capacity(t);
    for k in 0..t {
        let b = &beff[k];
        let next = ricc.pi(k + 1)?;
        let h = symmetrize(&(DMatrix::identity(b.ncols(), b.ncols()) + b.transpose() * next * b));
        let sigma = linalg::pd_inverse(&h).map_err(|_| Error::InfeasibleRiccati(k))?;
        gains.push(-&sigma * b.transpose() * next * sys.a(k));
        covs.push(sigma);
    }
    AffinePolicy::feedback(gains, covs)
}

/// Terminal weight that steers `𝒩(0, Σ_ini)` to `𝒩(0, Σ_fin)` together with
/// its intermediates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TerminalWeightSolution {
    /// Forward Lyapunov sequence `Q_k`; absent when `𝓕` is singular.
    #[serde(serialize_with = "serialize_opt_sequence")]
    pub q: Option<Vec<DMatrix<f64>>>,
    /// `Π_k = Q_k⁻¹`, from the backward recursion started at `F`.
    #[serde(with = "linalg::serde_matrices")]
    pub pi: Vec<DMatrix<f64>>,
    #[serde(with = "linalg::serde_matrix")]
    pub f: DMatrix<f64>,
    #[serde(with = "linalg::serde_matrix")]
    pub s0: DMatrix<f64>,
    #[serde(with = "linalg::serde_matrix")]
    pub st: DMatrix<f64>,
    #[serde(with = "linalg::serde_matrix")]
    pub cal_f: DMatrix<f64>,
    /// Smallest admissible split index for the reachability Gramians.
    pub k_r: usize,
}

/// Smallest `k_r ∈ [1, T]` with `G_r(k,0)` invertible for `k ≥ k_r` and
/// `G_r(T,k)` invertible for `k < k_r`.
pub fn admissible_split(sys: &LinearSystem, beff: &[DMatrix<f64>]) -> Result<Option<usize>> {
    let t = sys.horizon();
    let mut from_zero = vec![false; t + 1];
    let mut to_end = vec![false; t];
    for k in 1..=t {
        from_zero[k] = is_invertible(&sys.reachability_gramian(k, 0, Some(beff))?);
    }
    for (k, ok) in to_end.iter_mut().enumerate() {
        *ok = is_invertible(&sys.reachability_gramian(t, k, Some(beff))?);
    }
    Ok((1..=t).find(|&kr| (kr..=t).all(|k| from_zero[k]) && (0..kr).all(|k| to_end[k])))
}

fn sqrt_or(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    spd_sqrt(m).map_err(|_| Assumption::IndefiniteSqrtArgument(what).into())
}

pub fn me_terminal_weight(
    sys: &LinearSystem,
    beff: &[DMatrix<f64>],
    sigma_ini: &DMatrix<f64>,
    sigma_fin: &DMatrix<f64>,
) -> Result<TerminalWeightSolution> {
    let t = sys.horizon();
    let n = sys.state_dim();
    if sigma_ini.shape() != (n, n) || sigma_fin.shape() != (n, n) {
        return Err(Error::dims("boundary covariances do not match the state dimension"));
    }
    if let Some(k) = sys.first_singular_a() {
        return Err(Assumption::SingularA(k).into());
    }
    let gc = sys.controllability_gramian(t, 0, Some(beff))?;
    if !is_invertible(&gc) {
        return Err(Assumption::SingularGramian.into());
    }
    let k_r = admissible_split(sys, beff)?.ok_or(Error::from(Assumption::NoAdmissibleSplit))?;
    let gc_inv_half = pd_inv_sqrt(&gc).map_err(|_| Error::from(Assumption::SingularGramian))?;
    let gc_half = sqrt_or(&gc, "G_c")?;
    let phi0t = sys.state_transition(0, t)?;
    let s0 = symmetrize(&(&gc_inv_half * sigma_ini * &gc_inv_half));
    let st = symmetrize(&(&gc_inv_half * &phi0t * sigma_fin * phi0t.transpose() * &gc_inv_half));
    let s0_half = sqrt_or(&s0, "S0")?;
    let eye = DMatrix::<f64>::identity(n, n);
    let inner = symmetrize(&(&s0_half * &st * &s0_half + &eye * 0.25));
    let inner_half = sqrt_or(&inner, "S0^1/2 ST S0^1/2 + I/4")?;
    let cal_f = symmetrize(&(&s0 + &eye * 0.5 - &inner_half));
    let complement = symmetrize(&(-&s0 + &eye * 0.5 + &inner_half));
    if try_sym_inverse(&complement).is_none() {
        return Err(Assumption::SingularCalFComplement.into());
    }
    // Q_T = Φ Q_0 Φᵀ − G_r with Q_0 = U₀ 𝓕⁻¹ U₀ᵀ, inverted without forming 𝓕⁻¹
    let u0 = &gc_half * &s0_half;
    let u = sys.state_transition(t, 0)? * &u0;
    let u_inv = u.clone().try_inverse().ok_or(Error::from(Assumption::SingularGramian))?;
    let h = symmetrize(&(&u_inv * sys.reachability_gramian(t, 0, Some(beff))? * u_inv.transpose()));
    let core = (&eye - &cal_f * &h).try_inverse().ok_or(Error::from(Assumption::SingularQ(t)))?;
    let f = symmetrize(&(u_inv.transpose() * core * &cal_f * &u_inv));
    let ricc = riccati_me(sys, beff, &f)?;
    ricc.require_feasible()?;
    let pi = (0..=t).map(|k| ricc.pi(k).cloned()).collect::<Result<Vec<_>>>()?;
    let q = try_sym_inverse(&cal_f).map(|cal_f_inv| {
        let mut q = Vec::with_capacity(t + 1);
        q.push(symmetrize(&(&u0 * cal_f_inv * u0.transpose())));
        for k in 0..t {
            let b = &beff[k];
            let next = sys.a(k) * &q[k] * sys.a(k).transpose() - b * b.transpose();
            q.push(symmetrize(&next));
        }
        q
    });
    Ok(TerminalWeightSolution { q, pi, f, s0, st, cal_f, k_r })
}

/// Closed-loop policy from the Lyapunov sequence:
/// `Σ_k = (I + B̄ᵀQ_{k+1}⁻¹B̄)⁻¹`, `P_k = −Σ_k B̄ᵀQ_{k+1}⁻¹A_k` with `Q_{k+1}⁻¹ = Π_{k+1}`.
pub fn policy_from_lyapunov(sys: &LinearSystem, beff: &[DMatrix<f64>], tw: &TerminalWeightSolution) -> Result<AffinePolicy> {
    let t = sys.horizon();
    let mut gains = Vec::with_capacity(t);
    let mut covs = Vec::with_capacity(t);
    for k in 0..t {
        let b = &beff[k];
        let q_inv = &tw.pi[k + 1];
        let h = symmetrize(&(DMatrix::identity(b.ncols(), b.ncols()) + b.transpose() * q_inv * b));
        let sigma = linalg::pd_inverse(&h).map_err(|_| Error::from(Assumption::NonPositivePolicyCovariance(k)))?;
        gains.push(-&sigma * b.transpose() * q_inv * sys.a(k));
        covs.push(sigma);
    }
    AffinePolicy::feedback(gains, covs)
}

/// Optimal maximum-entropy density-steering policy under input matrices `beff`.
pub fn me_density_policy(
    sys: &LinearSystem,
    beff: &[DMatrix<f64>],
    sigma_ini: &DMatrix<f64>,
    sigma_fin: &DMatrix<f64>,
) -> Result<AffinePolicy> {
    let tw = me_terminal_weight(sys, beff, sigma_ini, sigma_fin)?;
    policy_from_lyapunov(sys, beff, &tw)
}
