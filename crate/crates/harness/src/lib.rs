//! Datasets, experiment drivers, checkpoints and reporting around `slt-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod experiments;
pub mod report;

use thiserror::Error;

use slt_core::prune::StepError;

pub use checkpoint::{Checkpoint, Role};
pub use config::{ExperimentConfig, ExperimentKind, Seeds};
pub use dataset::{Dataset, DatasetKind, DatasetSpec};
pub use experiments::{
    generate_samples, run_eval, run_finetune, run_find_slt, run_prune_pretrained, run_sweep, run_train_dense,
    FinetuneOutput, RunOutput, SweepOutput,
};
pub use report::MetricsRow;

/// Environment variable holding the number of sweep workers.
pub const WORKERS_ENV: &str = "SLT_WORKERS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] dataset::DataError),
    #[error("bad checkpoint {0}")]
    Checkpoint(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration and input errors, 3 for a
    /// numerical abort, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Data(_) | HarnessError::Checkpoint(_) => 2,
            HarnessError::Numerical(_) => 3,
            _ => 1,
        }
    }
}

impl From<StepError> for HarnessError {
    fn from(e: StepError) -> Self {
        if e.is_numerical() {
            HarnessError::Numerical(e.to_string())
        } else {
            HarnessError::Config(e.to_string())
        }
    }
}

impl From<slt_core::metrics::MetricsError> for HarnessError {
    fn from(e: slt_core::metrics::MetricsError) -> Self {
        use slt_core::metrics::MetricsError as M;
        match e {
            M::NonFinite => HarnessError::Numerical(e.to_string()),
            M::Step(s) => s.into(),
            other => HarnessError::Config(other.to_string()),
        }
    }
}

impl From<slt_core::nets::NetError> for HarnessError {
    fn from(e: slt_core::nets::NetError) -> Self {
        HarnessError::Config(e.to_string())
    }
}
