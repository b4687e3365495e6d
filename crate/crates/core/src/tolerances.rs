//! Numerical thresholds shared by every module.

/// Central record of the numerical thresholds used across the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Symmetry: `‖M − Mᵀ‖ ≤ symmetry · max(1, ‖M‖)`.
    pub symmetry: f64,
    /// Semidefiniteness: eigenvalues below `−psd · max(1, ‖M‖)` are rejected.
    pub psd: f64,
    /// Strict definiteness: the smallest eigenvalue must exceed this.
    pub pd: f64,
    /// Relative eigenvalue / singular-value cutoff (scaled by the largest one).
    pub rank: f64,
    /// Class membership residual, e.g. `‖(I − ΣΣ†)P‖`.
    pub membership: f64,
}

pub const TOL: Tolerances = Tolerances {
    symmetry: 1e-10,
    psd: 1e-10,
    pd: 1e-12,
    rank: 1e-12,
    membership: 1e-9,
};

impl Default for Tolerances {
    fn default() -> Self {
        TOL
    }
}
