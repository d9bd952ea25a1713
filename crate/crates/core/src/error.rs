use thiserror::Error;

/// Errors raised by model construction, the policy and the bound calculators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Cholesky factorization failed; `minor` is the 1-based order of the
    /// first leading principal minor that is not positive.
    #[error("model infeasible: leading minor of order {minor} is not positive definite (pivot {pivot:.3e})")]
    ModelInfeasible { minor: usize, pivot: f64 },

    #[error("illegal state: {0}")]
    IllegalState(&'static str),

    #[error("non-finite log-likelihood ratio at step {step}")]
    NonFiniteLlr { step: u64 },

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("undefined bound: {0}")]
    UndefinedBound(String),

    #[error("degenerate bound: {0}")]
    DegenerateBound(String),

    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
