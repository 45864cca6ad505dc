//! Dense tensors, a static differentiable graph over a closed operator
//! catalog, and the optimizer pieces used by every training loop.
//!
//! Catalog: matmul, add, mul, conv2d, relu, tanh, batchnorm,
//! nearest-upsample-2x, reshape, mean, sum, square. Broadcasting is limited
//! to adding a per-channel vector along axis 1.

mod graph;
pub mod kernels;
mod optim;
mod tensor;

use thiserror::Error;

pub use graph::{BatchNormMode, Gradients, Graph, NodeId, ParamId};
pub use optim::{AdamConfig, AdamState, CosineSchedule};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch at node {node} ({op}{}): {detail}", if label.is_empty() { String::new() } else { format!(" '{label}'") })]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        label: String,
        detail: String,
    },
    #[error("no placeholder named '{0}' in the graph")]
    UnknownPlaceholder(String),
    #[error("placeholder '{0}' was not bound")]
    MissingInput(String),
    #[error("loss must have a single element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("non-finite gradient entry at flat index {index}")]
    NonFiniteGradient { index: usize },
    #[error("{0}")]
    InvalidArgument(String),
}
