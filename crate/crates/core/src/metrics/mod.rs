//! Sample-quality metrics over feature sets: Fréchet distance between
//! Gaussian fits (sample covariance, `1/(N−1)`), k-NN precision/recall and
//! density/coverage (closed balls, Euclidean distance), and the evaluation
//! driver that ties them to a generator.

mod frechet;
mod knn;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Tensor;
use crate::mmd::{median_pairwise_distance, mmd2_kernel, KernelSpec, MmdError};
use crate::nets::{FeatureExtractor, Generator, NetError};
use crate::prune::{sample_chunked, StepError};
use crate::rng;
use crate::scalar::Scalar;

pub use frechet::{frechet_distance, frechet_from_moments, gaussian_fit, psd_sqrt};
pub use knn::{density_coverage, kth_neighbor_sq_radii, precision_recall};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("k = {k} needs a set of more than k points, got {size}")]
    InvalidK { k: usize, size: usize },
    #[error("feature widths differ: real {real}, fake {fake}")]
    DimensionMismatch { real: usize, fake: usize },
    #[error("features contain non-finite values")]
    NonFinite,
    #[error(transparent)]
    Mmd(#[from] MmdError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Step(#[from] StepError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Fake,
}

/// Samples × features matrix with its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<T> {
    pub matrix: Tensor<T>,
    pub source: Source,
}

impl<T: Scalar> FeatureSet<T> {
    pub fn real(matrix: Tensor<T>) -> Self {
        Self {
            matrix,
            source: Source::Real,
        }
    }

    pub fn fake(matrix: Tensor<T>) -> Self {
        Self {
            matrix,
            source: Source::Fake,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fd: f64,
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub mmd2_eval: f64,
    pub real_count: usize,
    pub fake_count: usize,
    pub k: usize,
}

/// All metrics between two feature sets.
pub fn evaluate_features<T: Scalar>(
    real: &FeatureSet<T>,
    fake: &FeatureSet<T>,
    kernel: &KernelSpec,
    k: usize,
) -> Result<MetricsReport, MetricsError> {
    let fd = frechet_distance(&real.matrix, &fake.matrix)?;
    let (precision, recall) = precision_recall(&real.matrix, &fake.matrix, k)?;
    let (density, coverage) = density_coverage(&real.matrix, &fake.matrix, k)?;
    let mmd2_eval = mmd2_kernel(&real.matrix, &fake.matrix, kernel)?.as_f64();
    Ok(MetricsReport {
        fd,
        precision,
        recall,
        density,
        coverage,
        mmd2_eval,
        real_count: real.matrix.rows_cols().0,
        fake_count: fake.matrix.rows_cols().0,
        k,
    })
}

/// Which representation the metrics are computed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embedding {
    /// Flattened samples.
    Raw,
    /// Deepest tap of the extractor.
    LastTap,
}

/// Everything fixed across evaluations of one run: the real features, the
/// kernel (bandwidths from the median heuristic on the real features) and
/// the latent draws.
#[derive(Debug, Clone)]
pub struct EvalContext<T> {
    extractor: FeatureExtractor<T>,
    embedding: Embedding,
    real: FeatureSet<T>,
    kernel: KernelSpec,
    latents: Tensor<T>,
    k: usize,
    chunk: usize,
}

/// Rows used for the median heuristic.
const MEDIAN_ROWS: usize = 1024;

impl<T: Scalar> EvalContext<T> {
    /// `real` holds the reference samples; `count` fake samples are drawn
    /// from latents fixed by `seed`.
    pub fn new(
        extractor: FeatureExtractor<T>,
        embedding: Embedding,
        real: &Tensor<T>,
        latent_dim: usize,
        count: usize,
        k: usize,
        seed: u64,
        chunk: usize,
    ) -> Result<Self, MetricsError> {
        let features = embed(&extractor, embedding, real, chunk)?;
        let median = median_pairwise_distance(&features, MEDIAN_ROWS)?;
        let latents = rng::standard_normal(&mut rng::seeded(seed, 0), &[count, latent_dim]);
        Ok(Self {
            extractor,
            embedding,
            real: FeatureSet::real(features),
            kernel: KernelSpec::median_mixture(median),
            latents,
            k,
            chunk,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn real_features(&self) -> &FeatureSet<T> {
        &self.real
    }

    pub fn latents(&self) -> &Tensor<T> {
        &self.latents
    }

    pub fn embed(&self, samples: &Tensor<T>) -> Result<Tensor<T>, MetricsError> {
        embed(&self.extractor, self.embedding, samples, self.chunk)
    }

    /// Metrics of already generated samples.
    pub fn evaluate_samples(&self, samples: &Tensor<T>) -> Result<MetricsReport, MetricsError> {
        let fake = FeatureSet::fake(self.embed(samples)?);
        evaluate_features(&self.real, &fake, &self.kernel, self.k)
    }

    /// Generate from the fixed latents with the generator's current masks and score the result.
    pub fn evaluate(&self, generator: &mut Generator<T>) -> Result<MetricsReport, MetricsError> {
        let samples = sample_chunked(generator, &self.latents, self.chunk)?;
        self.evaluate_samples(&samples)
    }
}

fn embed<T: Scalar>(
    extractor: &FeatureExtractor<T>,
    embedding: Embedding,
    samples: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>, MetricsError> {
    match embedding {
        Embedding::Raw => {
            let (n, d) = samples.rows_cols();
            Ok(samples.reshaped(&[n, d]).map_err(NetError::from)?)
        }
        Embedding::LastTap => {
            let mut taps = extractor.extract_batched(samples, chunk)?;
            Ok(taps.pop().expect("at least one tap"))
        }
    }
}
