use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller-side contract was not met (missing data, wrong dimensions).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Non-finite values appeared while stepping an SDE.
    #[error("integration failed at step {step}: {reason}")]
    Integration { step: usize, reason: String },

    /// Numerical self-check failed (e.g. a matrix that must be symmetric is not).
    #[error("internal numerical error: {0}")]
    Internal(String),

    #[error("support of {size} points exceeds exact-solver cap {cap}; use the sliced estimator")]
    SupportCap { size: usize, cap: usize },

    #[error("path {index} failed: {source}")]
    Path {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    /// True for errors caused by user input rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::Precondition(_) | Error::SupportCap { .. } => true,
            Error::Path { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
