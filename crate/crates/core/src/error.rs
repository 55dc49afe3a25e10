//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bilinear discretization singular: |1 - step*a/2| = {denom:.3e} at pole {index}")]
    BilinearSingularity { denom: f64, index: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("annotation error at line {line}: {reason}")]
    Annotation { line: usize, reason: String },

    #[error("unknown token: {0}")]
    UnknownToken(String),

    #[error("decoder distribution not normalized: row {row} sums to {sum}")]
    DecoderNotNormalized { row: usize, sum: f64 },

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input (CLI exit code 1);
    /// everything else is a runtime failure (exit code 2).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::InvalidData(_)
                | Error::Annotation { .. }
                | Error::UnknownToken(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
