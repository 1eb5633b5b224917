use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("unstable generator: spectral abscissa {abscissa:e} is not negative")]
    Unstable { abscissa: f64 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mode {0:?} is not part of the basis")]
    ModeIndex(Vec<i32>),

    #[error("grid error: {0}")]
    Grid(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("sewing refinement diverges: {0}")]
    SewingDivergence(String),

    #[error("simulation diverged at t = {time}: norm {norm:e} exceeds {limit:e}")]
    Divergence { time: f64, norm: f64, limit: f64 },

    #[error("{failed} of {total} replicas failed; first failure: {first}")]
    ReplicaFailures { failed: usize, total: usize, first: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
