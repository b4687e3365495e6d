//! Symmetric-matrix kernels and Gaussian distributions.
//!
//! Square roots, inverses, determinants and pseudo-inverses of symmetric
//! arguments all go through one symmetric eigendecomposition so that
//! positive-semidefinite and nearly singular inputs are treated uniformly:
//! eigenvalues below `TOL.rank · λ_max` count as zero.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tolerances::TOL;

/// Multivariate normal distribution with a symmetric PSD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::dims(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        check_symmetric(&cov)?;
        let cov = symmetrize(&cov);
        check_psd(&cov)?;
        Ok(Self { mean, cov })
    }

    pub fn zero_mean(cov: DMatrix<f64>) -> Result<Self> {
        Self::new(DVector::zeros(cov.nrows()), cov)
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Distribution of `S x + c` for `x` drawn from `self`.
    pub fn affine_map(&self, s: &DMatrix<f64>, c: &DVector<f64>) -> Result<Self> {
        if s.ncols() != self.dim() || s.nrows() != c.len() {
            return Err(Error::dims("affine map does not match the Gaussian"));
        }
        Ok(Self {
            mean: s * &self.mean + c,
            cov: symmetrize(&(s * &self.cov * s.transpose())),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct GaussianDoc {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl Serialize for Gaussian {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        GaussianDoc {
            mean: self.mean.iter().copied().collect(),
            cov: matrix_to_rows(&self.cov),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Gaussian {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = GaussianDoc::deserialize(deserializer)?;
        let cov = matrix_from_rows(&doc.cov).map_err(serde::de::Error::custom)?;
        Gaussian::new(DVector::from_vec(doc.mean), cov).map_err(serde::de::Error::custom)
    }
}

/// Row-major nested representation used by every JSON document.
pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> std::result::Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".to_owned());
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) mod serde_matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        matrix_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        matrix_from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

pub(crate) mod serde_matrices {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
        ms.iter().map(matrix_to_rows).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<DMatrix<f64>>, D::Error> {
        let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        all.iter()
            .map(|rows| matrix_from_rows(rows).map_err(serde::de::Error::custom))
            .collect()
    }
}

pub(crate) mod serde_vectors {
    use super::*;

    pub fn serialize<S: Serializer>(vs: &[DVector<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
        vs.iter()
            .map(|v| v.iter().copied().collect::<Vec<_>>())
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<DVector<f64>>, D::Error> {
        let all = Vec::<Vec<f64>>::deserialize(d)?;
        Ok(all.into_iter().map(DVector::from_vec).collect())
    }
}

pub(crate) mod serde_vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        v.iter().copied().collect::<Vec<_>>().serialize(s)
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn scale(m: &DMatrix<f64>) -> f64 {
    m.norm().max(1.0)
}

pub fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::dims(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    let asym = (m - m.transpose()).norm();
    if asym > TOL.symmetry * scale(m) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == 0 {
        return Ok(());
    }
    let lo = min_eigenvalue(m);
    if lo < -TOL.psd * scale(m) {
        return Err(Error::NotPsd(lo));
    }
    Ok(())
}

/// Eigendecomposition of the symmetric part of `m`.
pub fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).eigenvalues.min()
}

/// Eigenvalues in ascending order.
pub fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = sym_eigen(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Rebuilds `V f(Λ) Vᵀ`.
fn spectral_apply(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let v = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    symmetrize(&(v * d * v.transpose()))
}

fn cutoff(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> f64 {
    let big = eig.eigenvalues.iter().fold(0.0_f64, |a, &l| a.max(l.abs()));
    TOL.rank * big
}

/// Principal square root of a symmetric PSD matrix.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(m)?;
    check_psd(m)?;
    Ok(spectral_apply(&sym_eigen(m), |l| l.max(0.0).sqrt()))
}

/// Inverse of a symmetric (possibly indefinite) matrix, `None` when singular.
pub fn try_sym_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(m.clone());
    }
    let eig = sym_eigen(m);
    let tol = cutoff(&eig);
    if eig.eigenvalues.iter().any(|l| l.abs() <= tol) || tol == 0.0 {
        return None;
    }
    Some(spectral_apply(&eig, |l| 1.0 / l))
}

fn check_pd(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    check_symmetric(m)?;
    let eig = sym_eigen(m);
    let lo = eig.eigenvalues.min();
    if !(lo > TOL.pd) {
        return Err(Error::NotPd(lo));
    }
    Ok(eig)
}

/// Inverse of a symmetric positive-definite matrix.
pub fn pd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(spectral_apply(&check_pd(m)?, |l| 1.0 / l))
}

/// `M^{-1/2}` of a symmetric positive-definite matrix.
pub fn pd_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(spectral_apply(&check_pd(m)?, |l| 1.0 / l.sqrt()))
}

/// `ln |M|` for symmetric positive-definite `M`.
pub fn pd_log_det(m: &DMatrix<f64>) -> Result<f64> {
    Ok(check_pd(m)?.eigenvalues.iter().map(|l| l.ln()).sum())
}

/// Moore–Penrose inverse through the SVD.
///
/// Singular values at or below `1e-12 · σ_max · max(n, m)` are treated as zero.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = TOL.rank * smax * r.max(c) as f64;
    let u = svd.u.expect("svd computed with u");
    let vt = svd.v_t.expect("svd computed with v_t");
    let mut out = DMatrix::zeros(c, r);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            out += vt.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    out
}

/// Orthogonal projector onto the image of a symmetric PSD matrix.
pub fn range_projector(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = sym_eigen(m);
    let tol = cutoff(&eig);
    spectral_apply(&eig, |l| if l > tol { 1.0 } else { 0.0 })
}

/// Smallest-to-largest singular value ratio test for general square matrices.
pub fn is_invertible(m: &DMatrix<f64>) -> bool {
    if !m.is_square() {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let sv = m.singular_values();
    let smax = sv.max();
    smax > 0.0 && sv.min() > TOL.rank * smax
}

pub fn has_full_column_rank(m: &DMatrix<f64>) -> bool {
    if m.ncols() > m.nrows() {
        return false;
    }
    if m.ncols() == 0 {
        return true;
    }
    let sv = m.singular_values();
    let smax = sv.max();
    smax > 0.0 && sv.min() > TOL.rank * smax
}

/// `‖a − b‖_F / ‖b‖_F`, falling back to the absolute error when `b = 0`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let d = (a - b).norm();
    let n = b.norm();
    if n > 0.0 {
        d / n
    } else {
        d
    }
}

/// `KL(p ‖ q)` for Gaussians with strictly positive-definite `cov(q)`.
///
/// A singular `cov(p)` concentrates `p` on a null set of `q`, so the
/// divergence is `+∞` (returned as `f64::INFINITY`).
pub fn kl_gaussian(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::dims(format!("KL between dimensions {} and {}", p.dim(), q.dim())));
    }
    if p.dim() == 0 {
        return Ok(0.0);
    }
    if !(min_eigenvalue(q.cov()) > TOL.pd) {
        return Err(Error::DegenerateReference);
    }
    kl_gaussian_on_support(p, q)
}

/// `KL(p ‖ q)` where `q` may be degenerate.
///
/// Both distributions are restricted to the affine support of `q`. The result
/// is finite only when `p` lives on exactly that support: `Im Σ_p = Im Σ_q` and
/// `μ_p − μ_q ∈ Im Σ_q`. Otherwise `+∞`.
pub fn kl_gaussian_on_support(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::dims(format!("KL between dimensions {} and {}", p.dim(), q.dim())));
    }
    let eig = sym_eigen(q.cov());
    let tol = cutoff(&eig).max(TOL.pd);
    let keep: Vec<usize> = (0..q.dim()).filter(|&i| eig.eigenvalues[i] > tol).collect();
    let r = keep.len();
    let basis = DMatrix::from_fn(q.dim(), r, |i, j| eig.eigenvectors[(i, keep[j])]);
    let leak = DMatrix::identity(q.dim(), q.dim()) - &basis * basis.transpose();

    let dmu = q.mean() - p.mean();
    let p_scale = p.cov().norm().max(1.0);
    if (&leak * p.cov()).norm() > TOL.membership * p_scale
        || (&leak * &dmu).norm() > TOL.membership * dmu.norm().max(1.0)
    {
        return Ok(f64::INFINITY);
    }
    if r == 0 {
        return Ok(0.0);
    }
    let sp = symmetrize(&(basis.transpose() * p.cov() * &basis));
    let p_eig = SymmetricEigen::new(sp.clone());
    let p_lo = p_eig.eigenvalues.min();
    let p_hi = p_eig.eigenvalues.max();
    if !(p_lo > TOL.rank * p_hi.max(TOL.pd)) || p_lo <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let lq: Vec<f64> = keep.iter().map(|&i| eig.eigenvalues[i]).collect();
    let q_inv = DMatrix::from_fn(r, r, |i, j| if i == j { 1.0 / lq[i] } else { 0.0 });
    let dmu_r = basis.transpose() * dmu;
    let trace = (&q_inv * &sp).trace();
    let maha = (dmu_r.transpose() * &q_inv * &dmu_r)[(0, 0)];
    let log_det_q: f64 = lq.iter().map(|l| l.ln()).sum();
    let log_det_p: f64 = p_eig.eigenvalues.iter().map(|l| l.ln()).sum();
    let kl = 0.5 * (trace + maha - r as f64 + log_det_q - log_det_p);
    Ok(kl.max(0.0))
}

/// Differential entropy `½ ln((2πe)^d |Σ|)`.
pub fn gaussian_entropy(p: &Gaussian) -> Result<f64> {
    let d = p.dim() as f64;
    let log_det = pd_log_det(p.cov()).map_err(|_| Error::DegenerateCovariance)?;
    Ok(0.5 * (d * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + log_det))
}
