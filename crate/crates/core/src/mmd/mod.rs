//! Moment-matching losses: kernel MMD between sample sets, mean/std feature
//! matching over extractor taps, and the moving-average bank of real moments.

mod bank;
mod feature;
mod kernel;

use thiserror::Error;

use crate::engine::EngineError;

pub use bank::{MomentBank, MomentConfig};
pub use feature::{column_moments, feature_matching_loss, FeatureLoss};
pub use kernel::{median_pairwise_distance, mmd2_kernel, mmd2_kernel_with_grad, KernelKind, KernelSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MmdError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}
