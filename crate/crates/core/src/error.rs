use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is singular or nearly singular")]
    SingularMatrix,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("chain is not ergodic: the stationary system is singular")]
    NonErgodic,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate totals: sample variance {variance} is not below sample mean {mean}")]
    DegenerateTotals { mean: f64, variance: f64 },

    #[error("state {0} has vanishing estimated marginal; transition rows are unidentifiable")]
    SingularMarginal(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("optimization failed: {0}")]
    OptimizationFailed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
