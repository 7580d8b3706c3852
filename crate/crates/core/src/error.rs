use thiserror::Error;

/// Errors raised by model evaluation, fitting and data handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} coefficients' worth of covariates, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid covariate specification: {0}")]
    Spec(String),

    #[error("record {index}: {message}")]
    Record { index: usize, message: String },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("stratum {stratum} has zero probability under the current parameters")]
    ZeroProbabilityStratum { stratum: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("too many failed units: {failed} of {total} ({what})")]
    TooManyFailures { what: &'static str, failed: usize, total: usize },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
