//! Experiment configuration: a TOML tree with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slt_core::engine::AdamConfig;
use slt_core::metrics::Embedding;
use slt_core::mmd::MomentConfig;
use slt_core::nets::{FeatureExtractorSpec, GeneratorSpec, InitScheme};
use slt_core::prune::{LossKind, MaskPolicy, ScoreGradient};

use crate::dataset::DatasetSpec;
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    TrainDense,
    FindSlt,
    PrunePretrained,
    Finetune,
    Sweep,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub weights: u64,
    pub scores: u64,
    pub data: u64,
    pub eval: u64,
}

impl Seeds {
    /// `weights = s, scores = s+1, data = s+2, eval = s+3`.
    pub fn from_base(s: u64) -> Self {
        Self {
            weights: s,
            scores: s.wrapping_add(1),
            data: s.wrapping_add(2),
            eval: s.wrapping_add(3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_lr() -> f64 {
    5e-5
}
fn default_lr_min() -> f64 {
    0.0
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            lr_min: default_lr_min(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            base_lr: self.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every this many steps (0: only at the start and the end).
    #[serde(default = "default_every")]
    pub every: u64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_embedding")]
    pub embedding: Embedding,
    /// Rows per generator or extractor call during evaluation.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
}

fn default_every() -> u64 {
    1000
}
fn default_samples() -> usize {
    2048
}
fn default_k() -> usize {
    3
}
fn default_embedding() -> Embedding {
    Embedding::Raw
}
fn default_chunk() -> usize {
    256
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: default_every(),
            samples: default_samples(),
            k: default_k(),
            embedding: default_embedding(),
            chunk: default_chunk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub k_percent: Vec<f64>,
    pub init: Vec<InitScheme>,
    pub channel_multiplier: Vec<f64>,
    /// Every cell reuses the base seeds; otherwise cell `i` derives its own.
    #[serde(default = "yes")]
    pub paired_seeds: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub generator: GeneratorSpec,
    pub extractor: FeatureExtractorSpec,
    pub data: DatasetSpec,
    pub policy: MaskPolicy,
    #[serde(default = "default_init")]
    pub init: InitScheme,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Kernel-MMD loss bandwidths; empty selects the median heuristic on the first real batch.
    #[serde(default)]
    pub loss_bandwidths: Vec<f64>,
    #[serde(default)]
    pub score_gradient: ScoreGradient,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub moments: MomentConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub steps: u64,
    #[serde(default)]
    pub eval: EvalConfig,
    pub seeds: Seeds,
    /// Dense weights for prune_pretrained; weights and masks for finetune, eval and generate.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Masks replacing those of `checkpoint`.
    #[serde(default)]
    pub mask_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub sweep: Option<SweepGrid>,
    /// Check the frozen state's fingerprint every this many steps.
    #[serde(default = "default_hash_every")]
    pub hash_check_every: u64,
    /// Record elapsed seconds in the CSV (makes CSVs run-dependent).
    #[serde(default)]
    pub log_wallclock: bool,
    #[serde(default = "default_sample_count")]
    pub sample_count: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_init() -> InitScheme {
    InitScheme::KaimingNormal
}
fn default_loss() -> LossKind {
    LossKind::FeatureMatching
}
fn default_batch() -> usize {
    64
}
fn default_hash_every() -> u64 {
    1000
}
fn default_sample_count() -> usize {
    256
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut tree: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::Config(format!("cannot parse: {}", e.to_string().trim_end())))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let config: Self = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string().trim_end().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.generator.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.extractor.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.policy.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.extractor.input_shape != self.generator.output_shape {
            return bad(format!(
                "extractor input_shape {:?} differs from generator output_shape {:?}",
                self.extractor.input_shape, self.generator.output_shape
            ));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.optim.lr > 0.0) || !(self.optim.lr_min >= 0.0) || self.optim.lr_min > self.optim.lr {
            return bad("optim needs 0 <= lr_min <= lr and lr > 0".into());
        }
        if self.eval.samples <= self.eval.k || self.eval.k == 0 {
            return bad(format!("eval.samples ({}) must exceed eval.k ({}) >= 1", self.eval.samples, self.eval.k));
        }
        if self.loss_bandwidths.iter().any(|&b| !(b > 0.0)) {
            return bad("loss_bandwidths must be positive".into());
        }
        match self.experiment {
            ExperimentKind::PrunePretrained | ExperimentKind::Finetune | ExperimentKind::Eval => {
                if self.checkpoint.is_none() {
                    return bad(format!("{:?} needs a checkpoint", self.experiment));
                }
            }
            ExperimentKind::Sweep => {
                let Some(grid) = &self.sweep else {
                    return bad("sweep needs a [sweep] grid".into());
                };
                if grid.k_percent.is_empty() || grid.init.is_empty() || grid.channel_multiplier.is_empty() {
                    return bad("every sweep axis needs at least one value".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// The generator spec with its seed taken from `seeds.weights`.
    pub fn generator_spec(&self) -> GeneratorSpec {
        let mut spec = self.generator.clone();
        spec.seed = self.seeds.weights;
        spec
    }
}

/// Set `a.b.c = value`, creating intermediate tables. The value is parsed as
/// TOML, falling back to a bare string.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<(), HarnessError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override '{assignment}' is not key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(HarnessError::Config(format!("override '{assignment}' has an empty key")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().expect("non-empty path");
    let mut node = tree;
    for k in keys {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override '{assignment}': '{k}' is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_values_and_create_tables() {
        let mut t: toml::Table = "a = 1".parse().unwrap();
        apply_override(&mut t, "b.c = 2.5").unwrap();
        apply_override(&mut t, "b.d=hello").unwrap();
        apply_override(&mut t, "e=[1, 2]").unwrap();
        assert_eq!(t["b"]["c"].as_float(), Some(2.5));
        assert_eq!(t["b"]["d"].as_str(), Some("hello"));
        assert_eq!(t["e"].as_array().unwrap().len(), 2);
        assert!(apply_override(&mut t, "a.x=1").is_err());
        assert!(apply_override(&mut t, "nokey").is_err());
    }
}
