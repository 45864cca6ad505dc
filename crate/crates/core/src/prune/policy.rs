use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::prune::PruneError;
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    PerLayer,
    Global,
}

impl MaskScope {
    pub fn name(self) -> &'static str {
        match self {
            MaskScope::PerLayer => "per_layer",
            MaskScope::Global => "global",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Keep the largest `|score|` entries.
    EdgePopup,
    /// Keep a uniformly random subset of the same size, ignoring scores.
    RandomBaseline,
}

/// How many entries survive and how they are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPolicy {
    pub k_percent: f64,
    #[serde(default = "default_scope")]
    pub scope: MaskScope,
    /// Layers kept dense and excluded from ranking. A name matches a slot
    /// whose id equals it or starts with `name.`.
    #[serde(default)]
    pub frozen_layers: BTreeSet<String>,
    #[serde(default = "default_mode")]
    pub mode: MaskMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_scope() -> MaskScope {
    MaskScope::PerLayer
}
fn default_mode() -> MaskMode {
    MaskMode::EdgePopup
}

impl MaskPolicy {
    pub fn per_layer(k_percent: f64) -> Self {
        Self {
            k_percent,
            scope: MaskScope::PerLayer,
            frozen_layers: BTreeSet::new(),
            mode: MaskMode::EdgePopup,
            seed: 0,
        }
    }

    pub fn global(k_percent: f64) -> Self {
        Self {
            scope: MaskScope::Global,
            ..Self::per_layer(k_percent)
        }
    }

    pub fn validate(&self) -> Result<(), PruneError> {
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(PruneError::InvalidK(self.k_percent));
        }
        Ok(())
    }

    pub fn is_frozen(&self, layer_id: &str) -> bool {
        self.frozen_layers.iter().any(|name| {
            layer_id == name || (layer_id.len() > name.len() && layer_id.starts_with(name.as_str()) && layer_id.as_bytes()[name.len()] == b'.')
        })
    }

    /// Entries kept in a layer of `size` under per-layer scope.
    pub fn layer_keep(&self, size: usize) -> usize {
        (((self.k_percent / 100.0) * size as f64).round() as usize).clamp(1, size)
    }

    /// Entries kept across non-frozen layers totalling `size` under global scope.
    pub fn global_keep(&self, size: usize) -> usize {
        (((self.k_percent / 100.0) * size as f64).round() as usize).min(size)
    }

    /// Binary masks for layers with the given scores. Frozen layers are all ones.
    pub fn select<T: Scalar>(&self, scores: &[&[T]], frozen: &[bool]) -> Result<Vec<Vec<bool>>, PruneError> {
        self.validate()?;
        if scores.len() != frozen.len() {
            return Err(PruneError::LayerCount {
                expected: scores.len(),
                got: frozen.len(),
            });
        }
        let mut masks: Vec<Vec<bool>> = scores
            .iter()
            .zip(frozen)
            .map(|(s, &f)| vec![f; s.len()])
            .collect();
        match (self.scope, self.mode) {
            (MaskScope::PerLayer, MaskMode::EdgePopup) => {
                for (l, s) in scores.iter().enumerate() {
                    if !frozen[l] {
                        for i in top_indices(s.len(), self.layer_keep(s.len()), |i| s[i].abs()) {
                            masks[l][i] = true;
                        }
                    }
                }
            }
            (MaskScope::PerLayer, MaskMode::RandomBaseline) => {
                for (l, s) in scores.iter().enumerate() {
                    if !frozen[l] {
                        let mut r = rng::seeded(self.seed, l as u64);
                        for i in index::sample(&mut r, s.len(), self.layer_keep(s.len())) {
                            masks[l][i] = true;
                        }
                    }
                }
            }
            (MaskScope::Global, mode) => {
                // Flatten non-frozen layers in order; flat position order is (layer, index) order.
                let mut offsets = Vec::new();
                let mut total = 0;
                for (l, s) in scores.iter().enumerate() {
                    if !frozen[l] {
                        offsets.push((l, total));
                        total += s.len();
                    }
                }
                let keep = self.global_keep(total);
                let locate = |flat: usize| {
                    let pos = offsets.partition_point(|&(_, start)| start <= flat) - 1;
                    let (l, start) = offsets[pos];
                    (l, flat - start)
                };
                let chosen: Vec<usize> = match mode {
                    MaskMode::EdgePopup => top_indices(total, keep, |flat| {
                        let (l, i) = locate(flat);
                        scores[l][i].abs()
                    }),
                    MaskMode::RandomBaseline => {
                        let mut r = rng::seeded(self.seed, u64::MAX);
                        index::sample(&mut r, total, keep).into_vec()
                    }
                };
                for flat in chosen {
                    let (l, i) = locate(flat);
                    masks[l][i] = true;
                }
            }
        }
        Ok(masks)
    }
}

/// Indices of the `keep` largest keys; equal keys prefer the lower index.
fn top_indices<T: Scalar>(len: usize, keep: usize, key: impl Fn(usize) -> T) -> Vec<usize> {
    if keep >= len {
        return (0..len).collect();
    }
    if keep == 0 {
        return Vec::new();
    }
    let keys: Vec<T> = (0..len).map(&key).collect();
    let mut order: Vec<usize> = (0..len).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        keys[*b]
            .partial_cmp(&keys[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    order.select_nth_unstable_by(keep - 1, cmp);
    order.truncate(keep);
    order
}
