use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index {index} out of range for {len} areas")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("sum-to-zero constraint violated: |sum(phi)| = {0:e}")]
    ConstraintViolation(f64),

    #[error("no left inverse: H is {m}x{n} and a left inverse requires m >= n")]
    NoLeftInverse { m: usize, n: usize },

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("areal covariance is not identifiable from a {m}x{n} membership matrix (needs m >= n)")]
    NonIdentifiable { m: usize, n: usize },

    #[error("invalid membership matrix: {0}")]
    InvalidMembership(String),

    #[error("membership simulation failed: {0}")]
    SimulationFailure(String),

    #[error("rejected: {0}")]
    Rejected(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("digest mismatch: {0}")]
    DigestMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
