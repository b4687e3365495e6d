//! Mutual-information regularized density control for discrete-time linear
//! systems, the matching generalized Schrödinger bridge with reference
//! refinement, and snapshot-based noise-covariance identification.

pub mod bridge;
pub mod error;
pub mod experiment;
pub mod identification;
pub mod linalg;
pub mod maxent;
pub mod midc;
pub mod system;
pub mod tolerances;
pub mod verify;

pub use error::{Assumption, Error, Result};
pub use linalg::Gaussian;
pub use system::{AffinePolicy, GaussianPrior, LinearSystem, MomentTrajectory};
pub use tolerances::{Tolerances, TOL};
