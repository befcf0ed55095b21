//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AkernError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate kernel")]
    DegenerateKernel,

    #[error("not PSD: pivot {pivot:.3e} at row {row} after max jitter")]
    NotPsd { row: usize, pivot: f64 },

    #[error("singular kernel system")]
    SingularSystem,

    #[error("singular matrix in LU solve (pivot {0:.3e})")]
    SingularLu(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("solver diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("no root found in bracket up to {limit:.3e}")]
    BracketFailure { limit: f64 },

    #[error("unsupported patch layout: {0}")]
    UnsupportedPatchLayout(String),

    #[error("data format error at byte {offset}: {message}")]
    DataFormat { offset: u64, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, AkernError>;
