//! Edge-popup pruning: scores, top-k mask selection and the training steps
//! for score search, fine-tuning under a fixed mask and dense training.
//!
//! Every prunable weight enters the generator graph as `θ ⊙ m`. The gradient
//! reaching the mask parameter is `∂L/∂(θ ⊙ m) ⊙ θ`, which is exactly the
//! straight-through score gradient, so search mode feeds it to Adam on the
//! scores and leaves `θ` untouched. Masks rank edges by `|s|`, so by default
//! that gradient is multiplied by `sign(s)` before the update.

mod policy;
mod scores;
mod session;

use thiserror::Error;

use crate::engine::EngineError;
use crate::mmd::MmdError;
use crate::nets::NetError;

pub use policy::{MaskMode, MaskPolicy, MaskScope};
pub use scores::{init_scores, pack_mask, unpack_mask, ScoreBank};
pub use session::{sample_chunked, LossKind, Mode, ScoreGradient, Session, SessionConfig, StepReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("k_percent must lie in (0, 100], got {0}")]
    InvalidK(f64),
    #[error("expected {expected} layers, got {got}")]
    LayerCount { expected: usize, got: usize },
    #[error("mask for '{0}' has entries other than 0 and 1")]
    NonBinaryMask(String),
}

/// Failure of a training step or session setup.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("loss became non-finite ({loss}) at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Mmd(#[from] MmdError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl StepError {
    /// True for failures caused by numbers blowing up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            StepError::NonFiniteLoss { .. }
                | StepError::Engine(EngineError::NonFiniteGradient { .. })
                | StepError::Mmd(MmdError::Engine(EngineError::NonFiniteGradient { .. }))
        )
    }
}
