//! Unified audio-description automation pipeline: state-space temporal
//! feature enhancement, anchor-based event detection, differentiable feature
//! suppression, script generation with a frozen toy decoder, language-guided
//! self-refinement, and the matching evaluation protocol — trainable and
//! verifiable on synthetic data.

pub mod error;
pub mod mat;

pub mod detector;
pub mod encoders;
pub mod generator;
pub mod lgd;
pub mod params;
pub mod ssm;
pub mod tape;

pub use error::{Error, Result};
pub use mat::Mat;

/// Temporary stub so the binary links while the CLI is under construction.
pub fn cli_main() -> i32 {
    0
}
