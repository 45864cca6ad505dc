//! Generators, the frozen random feature extractor and weight initializers.

mod extractor;
mod generator;
mod init;

use thiserror::Error;

use crate::engine::EngineError;

pub use extractor::{ExtractorKind, FeatureExtractor, FeatureExtractorSpec, EXTRACTOR_INPUT};
pub use generator::{
    Generator, GeneratorKind, GeneratorSpec, OutputActivation, PrunableSlot, LATENT_INPUT, SAMPLES_OUTPUT,
};
pub use init::{init_weights, init_with_rng, InitScheme};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("expected samples of shape [B, {expected:?}], got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Engine(#[from] EngineError),
}
