use thiserror::Error;

/// Errors produced anywhere in the evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue:e} below -{tolerance:e}")]
    NotPositiveSemidefinite { eigenvalue: f64, tolerance: f64 },

    #[error("{context}: need at least {required} samples, got {available}")]
    InsufficientSamples {
        context: &'static str,
        required: usize,
        available: usize,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("mixture component {index} collapsed (covariance not positive definite)")]
    DegenerateComponent { index: usize },

    #[error("{side} marginal sums to {sum}, expected 1")]
    InvalidMarginals { side: &'static str, sum: f64 },

    #[error("knee selection needs at least 3 curve points after skipping, got {usable}")]
    InsufficientCurve { usable: usize },

    #[error("ratio undefined: original value {0} is not positive")]
    DivisionDomain(f64),

    #[error("metric mismatch: {0} vs {1}")]
    MetricMismatch(String, String),

    #[error("unknown file format (magic {0:?})")]
    UnknownFormat([u8; 4]),

    #[error("truncated input: expected {expected} bytes, got {got}")]
    Truncated { expected: u64, got: u64 },

    #[error("i/o error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),
}

impl Error {
    /// True for failures of the numerics rather than of the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveSemidefinite { .. }
                | Error::Numerical(_)
                | Error::DegenerateComponent { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
