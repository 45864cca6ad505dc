//! Directory checkpoints: `manifest.json` plus one raw little-endian file per
//! tensor. Floats are stored as `f32`, masks as LSB-first packed bits.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slt_core::engine::Tensor;
use slt_core::mmd::MomentBank;
use slt_core::nets::Generator;
use slt_core::prune::{pack_mask, unpack_mask, ScoreBank};

use crate::HarnessError;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const TENSOR_DIR: &str = "tensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Score,
    Mask,
    Moment,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Weight => "weight",
            Role::Score => "score",
            Role::Mask => "mask",
            Role::Moment => "moment",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub file: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub step: u64,
    /// Real batches folded into the moment bank.
    #[serde(default)]
    pub moment_updates: u64,
    /// Adam step counts of the moment trackers, in tensor order.
    #[serde(default)]
    pub moment_adam_steps: Vec<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<Tensor<f64>>,
}

fn round_to_f32(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|x| x as f32 as f64)
}

impl Checkpoint {
    pub fn new(config_hash: &str, step: u64) -> Self {
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                config_hash: config_hash.to_string(),
                step,
                moment_updates: 0,
                moment_adam_steps: Vec::new(),
                tensors: Vec::new(),
            },
            values: Vec::new(),
        }
    }

    /// Add a tensor; values are rounded to single precision immediately so
    /// the in-memory state matches what a reload would produce.
    pub fn push(&mut self, name: impl Into<String>, role: Role, value: &Tensor<f64>) {
        let name = name.into();
        assert!(self.get(&name, role).is_none(), "duplicate {role:?} tensor '{name}'");
        let (ext, bytes) = match role {
            Role::Mask => ("bits", value.len().div_ceil(8)),
            _ => ("f32", 4 * value.len()),
        };
        self.manifest.tensors.push(TensorEntry {
            file: format!("{TENSOR_DIR}/{}.{name}.{ext}", role.name()),
            name,
            role,
            shape: value.shape().to_vec(),
            bytes,
        });
        self.values.push(match role {
            Role::Mask => value.clone(),
            _ => round_to_f32(value),
        });
    }

    pub fn get(&self, name: &str, role: Role) -> Option<&Tensor<f64>> {
        self.manifest
            .tensors
            .iter()
            .position(|e| e.name == name && e.role == role)
            .map(|i| &self.values[i])
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.manifest.tensors.iter().any(|e| e.role == role)
    }

    /// Generator weights (prunable slots and normalization parameters) and masks.
    pub fn add_generator(&mut self, g: &Generator<f64>) {
        for slot in g.slots() {
            self.push(slot.layer_id.clone(), Role::Weight, g.graph().param_value(slot.weight));
        }
        for &p in g.norm_params() {
            self.push(g.graph().param_name(p).to_string(), Role::Weight, g.graph().param_value(p));
        }
        for slot in g.slots() {
            self.push(slot.layer_id.clone(), Role::Mask, g.graph().param_value(slot.mask));
        }
    }

    pub fn add_scores(&mut self, g: &Generator<f64>, scores: &ScoreBank<f64>) {
        for (slot, s) in g.slots().iter().zip(&scores.scores) {
            self.push(slot.layer_id.clone(), Role::Score, s);
        }
    }

    pub fn add_moments(&mut self, bank: &MomentBank<f64>) {
        self.manifest.moment_updates = bank.updates;
        for (j, (mean, std)) in bank.means.iter().zip(&bank.stds).enumerate() {
            self.push(format!("tap{j}.mean"), Role::Moment, mean);
            self.push(format!("tap{j}.std"), Role::Moment, std);
            for (kind, state) in [("mean", &bank.mean_states[j]), ("std", &bank.std_states[j])] {
                self.push(format!("tap{j}.{kind}.adam_m"), Role::Moment, &state.m);
                self.push(format!("tap{j}.{kind}.adam_v"), Role::Moment, &state.v);
                self.manifest.moment_adam_steps.push(state.step_count);
            }
        }
    }

    /// Copy weights into `g`; every slot and normalization parameter must be present with matching shape.
    pub fn restore_weights(&self, g: &mut Generator<f64>) -> Result<(), HarnessError> {
        let mut targets: Vec<(String, slt_core::engine::ParamId)> =
            g.slots().iter().map(|s| (s.layer_id.clone(), s.weight)).collect();
        targets.extend(
            g.norm_params()
                .iter()
                .map(|&p| (g.graph().param_name(p).to_string(), p)),
        );
        let weight_count = self.manifest.tensors.iter().filter(|e| e.role == Role::Weight).count();
        if weight_count != targets.len() {
            return Err(HarnessError::Config(format!(
                "checkpoint has {weight_count} weight tensors, the configured generator has {}",
                targets.len()
            )));
        }
        for (name, id) in targets {
            let value = self
                .get(&name, Role::Weight)
                .ok_or_else(|| HarnessError::Config(format!("checkpoint lacks weights for '{name}'")))?;
            g.graph_mut()
                .set_param(id, value.clone())
                .map_err(|e| HarnessError::Config(format!("checkpoint weights for '{name}': {e}")))?;
        }
        Ok(())
    }

    fn per_slot(&self, g: &Generator<f64>, role: Role) -> Result<Vec<Tensor<f64>>, HarnessError> {
        g.slots()
            .iter()
            .map(|s| {
                let t = self
                    .get(&s.layer_id, role)
                    .ok_or_else(|| HarnessError::Config(format!("checkpoint lacks {role:?} for '{}'", s.layer_id)))?;
                if t.shape() != s.shape.as_slice() {
                    return Err(HarnessError::Config(format!(
                        "{role:?} for '{}' has shape {:?}, generator expects {:?}",
                        s.layer_id,
                        t.shape(),
                        s.shape
                    )));
                }
                Ok(t.clone())
            })
            .collect()
    }

    pub fn masks_for(&self, g: &Generator<f64>) -> Result<Vec<Tensor<f64>>, HarnessError> {
        self.per_slot(g, Role::Mask)
    }

    pub fn scores_for(&self, g: &Generator<f64>) -> Result<Vec<Tensor<f64>>, HarnessError> {
        self.per_slot(g, Role::Score)
    }

    pub fn restore_moments(&self, bank: &mut MomentBank<f64>) -> Result<(), HarnessError> {
        let missing = |n: &str| HarnessError::Config(format!("checkpoint lacks moment '{n}'"));
        let taps = bank.means.len();
        if self.manifest.moment_adam_steps.len() != 2 * taps {
            return Err(HarnessError::Config(format!(
                "checkpoint has moment state for {} taps, extractor has {taps}",
                self.manifest.moment_adam_steps.len() / 2
            )));
        }
        let fetch = |name: String, target: &mut Tensor<f64>| -> Result<(), HarnessError> {
            let t = self.get(&name, Role::Moment).ok_or_else(|| missing(&name))?;
            if t.shape() != target.shape() {
                return Err(HarnessError::Config(format!("moment '{name}' has shape {:?}", t.shape())));
            }
            *target = t.clone();
            Ok(())
        };
        for j in 0..taps {
            fetch(format!("tap{j}.mean"), &mut bank.means[j])?;
            fetch(format!("tap{j}.std"), &mut bank.stds[j])?;
            for (kind, state) in [("mean", &mut bank.mean_states[j]), ("std", &mut bank.std_states[j])] {
                fetch(format!("tap{j}.{kind}.adam_m"), &mut state.m)?;
                fetch(format!("tap{j}.{kind}.adam_v"), &mut state.v)?;
            }
            bank.mean_states[j].step_count = self.manifest.moment_adam_steps[2 * j];
            bank.std_states[j].step_count = self.manifest.moment_adam_steps[2 * j + 1];
        }
        bank.updates = self.manifest.moment_updates;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir.join(TENSOR_DIR))?;
        for (entry, value) in self.manifest.tensors.iter().zip(&self.values) {
            let bytes = match entry.role {
                Role::Mask => pack_mask(value),
                _ => value.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect(),
            };
            debug_assert_eq!(bytes.len(), entry.bytes);
            fs::write(dir.join(&entry.file), bytes)?;
        }
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(dir.join(MANIFEST), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let bad = |m: String| HarnessError::Checkpoint(format!("{}: {m}", dir.display()));
        let text = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| bad(format!("cannot read manifest: {e}")))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(format!("bad manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", manifest.format_version)));
        }
        let mut values = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.file.contains("..") || Path::new(&e.file).is_absolute() {
                return Err(bad(format!("tensor file '{}' escapes the checkpoint", e.file)));
            }
            let bytes = fs::read(dir.join(&e.file)).map_err(|err| bad(format!("cannot read {}: {err}", e.file)))?;
            let n: usize = e.shape.iter().product();
            let expected = match e.role {
                Role::Mask => n.div_ceil(8),
                _ => 4 * n,
            };
            if bytes.len() != e.bytes || bytes.len() != expected {
                return Err(bad(format!(
                    "{} holds {} bytes, manifest declares {} and shape {:?} needs {expected}",
                    e.file,
                    bytes.len(),
                    e.bytes,
                    e.shape
                )));
            }
            let t = match e.role {
                Role::Mask => unpack_mask(&bytes, &e.shape).ok_or_else(|| bad(format!("bad mask '{}'", e.name)))?,
                _ => {
                    let data = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                        .collect();
                    Tensor::new(&e.shape, data).map_err(|err| bad(err.to_string()))?
                }
            };
            values.push(t);
        }
        Ok(Self { manifest, values })
    }
}
