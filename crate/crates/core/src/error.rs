use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A precondition on a named parameter does not hold.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("oracle query rejected: {0}")]
    OracleQuery(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Monte Carlo or quadrature could not reach the requested accuracy.
    #[error("estimator failure: {0}")]
    Estimator(String),

    #[error("path {path} aborted at step {step}: {source}")]
    PathAborted {
        path: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
