//! Time-varying linear systems `x_{k+1} = A_k x_k + B_k u_k`, affine Gaussian
//! policies, Gaussian priors and exact moment propagation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, is_invertible, matrix_from_rows, matrix_to_rows, min_eigenvalue, pseudo_inverse, symmetrize, Gaussian,
};
use crate::tolerances::TOL;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    a_inv: Option<Vec<DMatrix<f64>>>,
    n: usize,
    m: usize,
}

impl LinearSystem {
    pub fn new(a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>) -> Result<Self> {
        let t = a.len();
        if t == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        if b.len() != t {
            return Err(Error::dims(format!("{} A matrices but {} B matrices", t, b.len())));
        }
        let n = a[0].nrows();
        let m = b[0].ncols();
        for (k, (ak, bk)) in a.iter().zip(&b).enumerate() {
            if ak.shape() != (n, n) {
                return Err(Error::dims(format!("A_{k} is {:?}, expected {n}x{n}", ak.shape())));
            }
            if bk.shape() != (n, m) {
                return Err(Error::dims(format!("B_{k} is {:?}, expected {n}x{m}", bk.shape())));
            }
        }
        let a_inv = a
            .iter()
            .map(|ak| if is_invertible(ak) { ak.clone().try_inverse() } else { None })
            .collect::<Option<Vec<_>>>();
        Ok(Self { a, b, a_inv, n, m })
    }

    pub fn time_invariant(a: DMatrix<f64>, b: DMatrix<f64>, horizon: usize) -> Result<Self> {
        Self::new(vec![a; horizon], vec![b; horizon])
    }

    /// Scalar system with constant coefficients.
    pub fn scalar(a: f64, b: f64, horizon: usize) -> Self {
        Self::time_invariant(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b), horizon)
            .expect("scalar system is well formed")
    }

    /// Same dynamics with the input matrices replaced.
    pub fn with_input(&self, b: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::new(self.a.clone(), b)
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn a(&self, k: usize) -> &DMatrix<f64> {
        &self.a[k]
    }

    pub fn b(&self, k: usize) -> &DMatrix<f64> {
        &self.b[k]
    }

    pub fn a_seq(&self) -> &[DMatrix<f64>] {
        &self.a
    }

    pub fn b_seq(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    pub fn is_time_invariant(&self) -> bool {
        self.a.iter().all(|x| x == &self.a[0]) && self.b.iter().all(|x| x == &self.b[0])
    }

    /// Whether every `A_k` passed the invertibility test.
    pub fn a_invertible(&self) -> bool {
        self.a_inv.is_some()
    }

    /// First non-invertible `A_k`, if any.
    pub fn first_singular_a(&self) -> Option<usize> {
        self.a.iter().position(|ak| !is_invertible(ak))
    }

    pub fn a_inverse(&self, k: usize) -> Result<&DMatrix<f64>> {
        match &self.a_inv {
            Some(inv) => Ok(&inv[k]),
            None => Err(Error::SingularA(self.first_singular_a().unwrap_or(k))),
        }
    }

    /// `B_k†` for each step.
    pub fn b_pinv(&self) -> Vec<DMatrix<f64>> {
        self.b.iter().map(pseudo_inverse).collect()
    }

    /// First `B_k` without full column rank, if any.
    pub fn first_rank_deficient_b(&self) -> Option<usize> {
        self.b.iter().position(|bk| !linalg::has_full_column_rank(bk))
    }

    fn check_time(&self, k: usize) -> Result<()> {
        if k > self.horizon() {
            return Err(Error::BadRange(format!("time {k} outside [0, {}]", self.horizon())));
        }
        Ok(())
    }

    /// `Φ(k, l)`: `A_{k−1}⋯A_l` for `k > l`, identity for `k = l`, and
    /// `A_k⁻¹⋯A_{l−1}⁻¹` for `k < l`.
    pub fn state_transition(&self, k: usize, l: usize) -> Result<DMatrix<f64>> {
        self.check_time(k)?;
        self.check_time(l)?;
        let mut phi = DMatrix::identity(self.n, self.n);
        if k >= l {
            for j in l..k {
                phi = &self.a[j] * phi;
            }
        } else {
            for j in k..l {
                phi = phi * self.a_inverse(j)?;
            }
        }
        Ok(phi)
    }

    fn input_seq<'a>(&'a self, beff: Option<&'a [DMatrix<f64>]>) -> Result<&'a [DMatrix<f64>]> {
        let seq = beff.unwrap_or(&self.b);
        if seq.len() != self.horizon() || seq.iter().any(|bk| bk.nrows() != self.n) {
            return Err(Error::dims("effective input sequence does not match the system"));
        }
        Ok(seq)
    }

    fn check_range(&self, k1: usize, k0: usize) -> Result<()> {
        if k0 >= k1 || k1 > self.horizon() {
            return Err(Error::BadRange(format!(
                "need 0 <= k0 < k1 <= {}, got k0={k0}, k1={k1}",
                self.horizon()
            )));
        }
        Ok(())
    }

    /// `G_r(k1, k0) = Σ_{k=k0}^{k1−1} Φ(k1,k+1) B_k B_kᵀ Φ(k1,k+1)ᵀ`.
    pub fn reachability_gramian(&self, k1: usize, k0: usize, beff: Option<&[DMatrix<f64>]>) -> Result<DMatrix<f64>> {
        self.check_range(k1, k0)?;
        let b = self.input_seq(beff)?;
        let mut g = DMatrix::zeros(self.n, self.n);
        // Φ(k1, k+1) built up from the right end
        let mut phi = DMatrix::identity(self.n, self.n);
        for k in (k0..k1).rev() {
            let pb = &phi * &b[k];
            g += &pb * pb.transpose();
            phi = phi * &self.a[k];
        }
        Ok(symmetrize(&g))
    }

    /// `G_c(k1, k0) = Σ_{k=k0}^{k1−1} Φ(k0,k+1) B_k B_kᵀ Φ(k0,k+1)ᵀ`.
    pub fn controllability_gramian(
        &self,
        k1: usize,
        k0: usize,
        beff: Option<&[DMatrix<f64>]>,
    ) -> Result<DMatrix<f64>> {
        self.check_range(k1, k0)?;
        let b = self.input_seq(beff)?;
        let mut g = DMatrix::zeros(self.n, self.n);
        let mut phi = DMatrix::identity(self.n, self.n);
        for k in k0..k1 {
            phi = phi * self.a_inverse(k)?;
            let pb = &phi * &b[k];
            g += &pb * pb.transpose();
        }
        Ok(symmetrize(&g))
    }

    /// Exact mean and covariance recursion under an affine Gaussian policy.
    pub fn propagate_moments(&self, policy: &AffinePolicy, init: &Gaussian) -> Result<MomentTrajectory> {
        if init.dim() != self.n {
            return Err(Error::dims(format!("initial Gaussian has dimension {}, state has {}", init.dim(), self.n)));
        }
        policy.check_against(self)?;
        let t = self.horizon();
        let mut means = Vec::with_capacity(t + 1);
        let mut covs = Vec::with_capacity(t + 1);
        means.push(init.mean().clone());
        covs.push(init.cov().clone());
        for k in 0..t {
            let (ak, bk) = (&self.a[k], &self.b[k]);
            let closed = ak + bk * &policy.gains[k];
            let mu = &closed * &means[k] + bk * &policy.offsets[k];
            let cov = &closed * &covs[k] * closed.transpose() + bk * &policy.covs[k] * bk.transpose();
            means.push(mu);
            covs.push(symmetrize(&cov));
        }
        Ok(MomentTrajectory { means, covs })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixSpec {
    Single(Vec<Vec<f64>>),
    Sequence(Vec<Vec<Vec<f64>>>),
}

impl MatrixSpec {
    fn expand(&self, horizon: usize, what: &str) -> std::result::Result<Vec<DMatrix<f64>>, String> {
        match self {
            MatrixSpec::Single(rows) => Ok(vec![matrix_from_rows(rows)?; horizon]),
            MatrixSpec::Sequence(all) => {
                if all.len() != horizon {
                    return Err(format!("{what} lists {} matrices but T = {horizon}", all.len()));
                }
                all.iter().map(|rows| matrix_from_rows(rows)).collect()
            }
        }
    }

    fn compress(seq: &[DMatrix<f64>]) -> Self {
        if seq.iter().all(|x| x == &seq[0]) {
            MatrixSpec::Single(matrix_to_rows(&seq[0]))
        } else {
            MatrixSpec::Sequence(seq.iter().map(matrix_to_rows).collect())
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SystemDoc {
    #[serde(rename = "T")]
    horizon: usize,
    n: usize,
    m: usize,
    #[serde(rename = "A")]
    a: MatrixSpec,
    #[serde(rename = "B")]
    b: MatrixSpec,
}

impl Serialize for LinearSystem {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SystemDoc {
            horizon: self.horizon(),
            n: self.n,
            m: self.m,
            a: MatrixSpec::compress(&self.a),
            b: MatrixSpec::compress(&self.b),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LinearSystem {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = SystemDoc::deserialize(d)?;
        let a = doc.a.expand(doc.horizon, "A").map_err(D::Error::custom)?;
        let b = doc.b.expand(doc.horizon, "B").map_err(D::Error::custom)?;
        let sys = LinearSystem::new(a, b).map_err(D::Error::custom)?;
        if sys.n != doc.n || sys.m != doc.m {
            return Err(D::Error::custom(format!(
                "declared n={}, m={} but matrices give n={}, m={}",
                doc.n, doc.m, sys.n, sys.m
            )));
        }
        Ok(sys)
    }
}

/// `π_k(·|x) = 𝒩(P_k x + q_k, Σ_{π_k})` for `k = 0..T−1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinePolicy {
    #[serde(with = "linalg::serde_matrices")]
    pub gains: Vec<DMatrix<f64>>,
    #[serde(with = "linalg::serde_vectors")]
    pub offsets: Vec<DVector<f64>>,
    #[serde(with = "linalg::serde_matrices")]
    pub covs: Vec<DMatrix<f64>>,
}

impl AffinePolicy {
    pub fn new(gains: Vec<DMatrix<f64>>, offsets: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if gains.len() != offsets.len() || gains.len() != covs.len() {
            return Err(Error::dims("policy sequences have different lengths"));
        }
        for (k, ((p, q), s)) in gains.iter().zip(&offsets).zip(&covs).enumerate() {
            if p.nrows() != q.len() || s.shape() != (q.len(), q.len()) {
                return Err(Error::dims(format!("policy step {k} has inconsistent shapes")));
            }
            linalg::check_symmetric(s)?;
            let lo = min_eigenvalue(s);
            if lo < -TOL.psd * s.norm().max(1.0) {
                return Err(Error::NotPsd(lo));
            }
        }
        Ok(Self { gains, offsets, covs })
    }

    /// Zero-offset policy.
    pub fn feedback(gains: Vec<DMatrix<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let offsets = gains.iter().map(|p| DVector::zeros(p.nrows())).collect();
        Self::new(gains, offsets, covs)
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    /// Membership in the class of zero-offset policies with `Im P_k ⊆ Im Σ_{π_k}`.
    pub fn in_p0(&self) -> bool {
        self.offsets.iter().all(|q| q.iter().all(|&v| v == 0.0))
            && self.gains.iter().zip(&self.covs).all(|(p, s)| {
                let proj = s * pseudo_inverse(s);
                let resid = (DMatrix::identity(s.nrows(), s.nrows()) - proj) * p;
                resid.norm() <= TOL.membership * p.norm().max(1.0)
            })
    }

    fn check_against(&self, sys: &LinearSystem) -> Result<()> {
        if self.horizon() != sys.horizon() {
            return Err(Error::dims(format!("policy horizon {} vs system {}", self.horizon(), sys.horizon())));
        }
        for k in 0..self.horizon() {
            if self.gains[k].shape() != (sys.b[k].ncols(), sys.n) {
                return Err(Error::dims(format!("P_{k} is {:?}", self.gains[k].shape())));
            }
        }
        Ok(())
    }

    /// Conditional input distribution at state `x`.
    pub fn conditional(&self, k: usize, x: &DVector<f64>) -> Result<Gaussian> {
        Gaussian::new(&self.gains[k] * x + &self.offsets[k], self.covs[k].clone())
    }
}

/// `ρ_k = 𝒩(μ_{ρ_k}, Σ_{ρ_k})` with strictly positive-definite covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorDoc")]
pub struct GaussianPrior {
    #[serde(with = "linalg::serde_vectors")]
    means: Vec<DVector<f64>>,
    #[serde(with = "linalg::serde_matrices")]
    covs: Vec<DMatrix<f64>>,
}

#[derive(Deserialize)]
struct PriorDoc {
    #[serde(with = "linalg::serde_vectors")]
    means: Vec<DVector<f64>>,
    #[serde(with = "linalg::serde_matrices")]
    covs: Vec<DMatrix<f64>>,
}

impl TryFrom<PriorDoc> for GaussianPrior {
    type Error = Error;
    fn try_from(doc: PriorDoc) -> Result<Self> {
        GaussianPrior::new(doc.means, doc.covs)
    }
}

impl GaussianPrior {
    pub fn new(means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if means.len() != covs.len() {
            return Err(Error::dims("prior means and covariances differ in length"));
        }
        let mut clean = Vec::with_capacity(covs.len());
        for (mu, s) in means.iter().zip(&covs) {
            if s.shape() != (mu.len(), mu.len()) {
                return Err(Error::dims("prior covariance does not match its mean"));
            }
            linalg::check_symmetric(s)?;
            let s = symmetrize(s);
            let lo = min_eigenvalue(&s);
            if !(lo > TOL.pd) {
                return Err(Error::NotPd(lo));
            }
            clean.push(s);
        }
        Ok(Self { means, covs: clean })
    }

    pub fn zero_mean(covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let means = covs.iter().map(|s| DVector::zeros(s.nrows())).collect();
        Self::new(means, covs)
    }

    /// `𝒩(0, c·I_m)` at every step.
    pub fn isotropic(horizon: usize, m: usize, c: f64) -> Result<Self> {
        Self::zero_mean(vec![DMatrix::identity(m, m) * c; horizon])
    }

    pub fn horizon(&self) -> usize {
        self.covs.len()
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    pub fn mean(&self, k: usize) -> &DVector<f64> {
        &self.means[k]
    }

    pub fn cov(&self, k: usize) -> &DMatrix<f64> {
        &self.covs[k]
    }

    pub fn is_zero_mean(&self) -> bool {
        self.means.iter().all(|mu| mu.iter().all(|&v| v == 0.0))
    }

    pub fn with_means(&self, means: Vec<DVector<f64>>) -> Result<Self> {
        Self::new(means, self.covs.clone())
    }

    pub fn step(&self, k: usize) -> Gaussian {
        Gaussian::new(self.means[k].clone(), self.covs[k].clone()).expect("prior steps are valid Gaussians")
    }
}

/// State marginals `𝒩(μ_{x_k}, Σ_{x_k})` for `k = 0..T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTrajectory {
    #[serde(with = "linalg::serde_vectors")]
    pub means: Vec<DVector<f64>>,
    #[serde(with = "linalg::serde_matrices")]
    pub covs: Vec<DMatrix<f64>>,
}

impl MomentTrajectory {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn last_mean(&self) -> &DVector<f64> {
        self.means.last().expect("non-empty trajectory")
    }

    pub fn last_cov(&self) -> &DMatrix<f64> {
        self.covs.last().expect("non-empty trajectory")
    }

    /// Largest deviation between two trajectories, means and covariances combined.
    pub fn max_abs_diff(&self, other: &MomentTrajectory) -> f64 {
        let dm = self.means.iter().zip(&other.means).map(|(a, b)| (a - b).amax());
        let dc = self.covs.iter().zip(&other.covs).map(|(a, b)| (a - b).amax());
        dm.chain(dc).fold(0.0, f64::max)
    }
}
