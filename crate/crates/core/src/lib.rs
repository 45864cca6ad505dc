//! Strong lottery ticket search for generative networks.
//!
//! A randomly initialized generator is pruned, never trained: every weight
//! carries a score, the top-k% scores per layer define a binary mask, and the
//! scores are updated by back-propagating a moment-matching loss through a
//! straight-through estimator. The crate provides the pieces of that loop:
//!
//! - [`engine`]: tensors, a static differentiable graph, Adam and cosine annealing
//! - [`nets`]: MLP and residual generators, frozen random feature extractors, initializers
//! - [`prune`]: scores, mask selection and the search / fine-tune steps
//! - [`mmd`]: kernel MMD, feature mean/std matching and the real-moment bank
//! - [`metrics`]: Fréchet distance, precision/recall, density/coverage
//!
//! All numeric code is generic over [`Scalar`]; the aliases below fix it to `f64`.

pub mod engine;
pub mod metrics;
pub mod mmd;
pub mod nets;
pub mod prune;
pub mod rng;
mod scalar;

pub use scalar::Scalar;

pub type Tensor = engine::Tensor<f64>;
pub type Graph = engine::Graph<f64>;
pub type AdamState = engine::AdamState<f64>;
pub type Generator = nets::Generator<f64>;
pub type FeatureExtractor = nets::FeatureExtractor<f64>;
pub type MomentBank = mmd::MomentBank<f64>;
pub type ScoreBank = prune::ScoreBank<f64>;
pub type Session = prune::Session<f64>;
pub type FeatureSet = metrics::FeatureSet<f64>;

pub type TensorF32 = engine::Tensor<f32>;
pub type GeneratorF32 = nets::Generator<f32>;
