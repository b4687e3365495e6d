use thiserror::Error;

/// Hypotheses of the terminal-weight construction that can fail individually.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Assumption {
    #[error("A_{0} is not invertible")]
    SingularA(usize),
    #[error("controllability Gramian G_c(T,0) is singular")]
    SingularGramian,
    #[error("no admissible split index k_r for the reachability Gramians")]
    NoAdmissibleSplit,
    #[error("the matrix S0 + I/2 - (S0^1/2 ST S0^1/2 + I/4)^1/2 is singular")]
    SingularCalF,
    #[error("the matrix -S0 + I/2 + (S0^1/2 ST S0^1/2 + I/4)^1/2 is singular")]
    SingularCalFComplement,
    #[error("square-root argument {0} is indefinite")]
    IndefiniteSqrtArgument(&'static str),
    #[error("Q_{0} of the Lyapunov recursion is singular")]
    SingularQ(usize),
    #[error("policy covariance at step {0} is not positive definite")]
    NonPositivePolicyCovariance(usize),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("matrix is not positive definite (smallest eigenvalue {0:e})")]
    NotPd(f64),
    #[error("reference covariance is not strictly positive definite")]
    DegenerateReference,
    #[error("covariance is singular")]
    DegenerateCovariance,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("A_{0} is singular but an inverse transition was requested")]
    SingularA(usize),
    #[error("invalid time range: {0}")]
    BadRange(String),
    #[error("reachability Gramian is singular")]
    SingularGramian,
    #[error("Riccati recursion infeasible at step {0}")]
    InfeasibleRiccati(usize),
    #[error("terminal weight F is singular")]
    SingularF,
    #[error("assumption violated{}: {which}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    AssumptionViolated {
        which: Assumption,
        iteration: Option<usize>,
    },
    #[error("B_{0} does not have full column rank")]
    RankDeficientB(usize),
    #[error("boundary means must be zero for this operation")]
    NonzeroMeans,
    #[error("prior must have zero means for this operation")]
    NonzeroPriorMeans,
    #[error("policy is not in the zero-offset class with Im(P) in Im(Sigma)")]
    PolicyClass,
    #[error("objective is infinite (support condition failed)")]
    InfiniteObjective,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("reference matrix for the relative error is zero")]
    ZeroTruth,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            Error::AssumptionViolated { which, .. } => Error::AssumptionViolated {
                which,
                iteration: Some(iteration),
            },
            other => other,
        }
    }
}

impl From<Assumption> for Error {
    fn from(which: Assumption) -> Self {
        Error::AssumptionViolated {
            which,
            iteration: None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
