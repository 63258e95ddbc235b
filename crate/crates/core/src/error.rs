use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A coefficient or simulated quantity became non-finite (or exceeded the blow-up threshold).
    #[error("non-finite value in {what} at path {path}, step {step}")]
    NonFinite {
        what: String,
        path: usize,
        step: usize,
    },

    #[error("non-finite value in {0}")]
    NonFiniteTerm(String),

    #[error("regression needs at least {required} paths, got {available}")]
    InsufficientPaths { required: usize, available: usize },

    #[error("regression design is ill-conditioned beyond ridge rescue (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("no oracle value available: {0}")]
    MissingOracle(String),

    #[error("descent aborted: {0}")]
    Aborted(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
