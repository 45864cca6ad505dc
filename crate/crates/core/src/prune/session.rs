use serde::{Deserialize, Serialize};

use crate::engine::{AdamConfig, AdamState, CosineSchedule, EngineError, Tensor};
use crate::mmd::{mmd2_kernel_with_grad, KernelSpec, MomentBank, MomentConfig};
use crate::nets::{FeatureExtractor, Generator};
use crate::prune::{MaskMode, MaskPolicy, PruneError, ScoreBank, StepError};
use crate::rng;
use crate::scalar::Scalar;

/// What a session optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Scores move, weights are frozen, masks follow the scores.
    Search,
    /// Surviving weights move under a fixed mask.
    Finetune,
    /// All weights and normalization parameters move; masks are all ones.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean/std matching of extractor taps against the moment bank.
    FeatureMatching,
    /// Kernel MMD between real and fake taps of the current batch, summed over taps.
    KernelMmd,
}

/// How the mask gradient is turned into a score gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreGradient {
    /// `∂L/∂m · sign(s)`: straight-through on `|s|`, the quantity masks rank by.
    #[default]
    Magnitude,
    /// `∂L/∂m` applied to `s` directly.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub policy: MaskPolicy,
    pub adam: AdamConfig,
    pub lr_min: f64,
    pub total_steps: u64,
    pub loss: LossKind,
    /// Required for [`LossKind::KernelMmd`].
    pub kernel: Option<KernelSpec>,
    pub moments: MomentConfig,
    pub score_seed: u64,
    pub score_gradient: ScoreGradient,
}

impl SessionConfig {
    pub fn new(policy: MaskPolicy, total_steps: u64) -> Self {
        Self {
            policy,
            adam: AdamConfig::default(),
            lr_min: 0.0,
            total_steps,
            loss: LossKind::FeatureMatching,
            kernel: None,
            moments: MomentConfig::default(),
            score_seed: 0,
            score_gradient: ScoreGradient::Magnitude,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// A generator together with everything one optimization run mutates.
#[derive(Debug, Clone)]
pub struct Session<T> {
    mode: Mode,
    config: SessionConfig,
    generator: Generator<T>,
    extractor: FeatureExtractor<T>,
    bank: MomentBank<T>,
    scores: ScoreBank<T>,
    frozen: Vec<bool>,
    weight_states: Vec<AdamState<T>>,
    norm_states: Vec<AdamState<T>>,
    schedule: CosineSchedule,
    step: u64,
}

impl<T: Scalar> Session<T> {
    fn assemble(
        mode: Mode,
        mut generator: Generator<T>,
        extractor: FeatureExtractor<T>,
        config: SessionConfig,
    ) -> Result<Self, StepError> {
        config.policy.validate()?;
        if config.loss == LossKind::KernelMmd {
            config
                .kernel
                .as_ref()
                .ok_or_else(|| StepError::Config("kernel_mmd loss needs a kernel".into()))?
                .validate()?;
        }
        if generator.taps().is_empty() {
            generator.attach_extractor(&extractor)?;
        }
        let widths = extractor.spec().tap_widths()?;
        let frozen: Vec<bool> = generator
            .slots()
            .iter()
            .map(|s| config.policy.is_frozen(&s.layer_id))
            .collect();
        let scores = ScoreBank::init(generator.slots(), config.score_seed, config.adam);
        let weight_states = generator
            .slots()
            .iter()
            .map(|s| AdamState::new(&s.shape, config.adam))
            .collect();
        let norm_states = generator
            .norm_params()
            .iter()
            .map(|&p| AdamState::new(generator.graph().param_value(p).shape(), config.adam))
            .collect();
        let schedule = CosineSchedule::new(config.adam.base_lr, config.lr_min, config.total_steps);
        let mut session = Self {
            mode,
            bank: MomentBank::new(&widths, config.moments),
            config,
            generator,
            extractor,
            scores,
            frozen,
            weight_states,
            norm_states,
            schedule,
            step: 0,
        };
        session.configure_grads();
        Ok(session)
    }

    /// Score search over frozen weights; masks start from the initial scores.
    pub fn search(generator: Generator<T>, extractor: FeatureExtractor<T>, config: SessionConfig) -> Result<Self, StepError> {
        let mut s = Self::assemble(Mode::Search, generator, extractor, config)?;
        s.refresh_masks()?;
        Ok(s)
    }

    /// Weight training under a fixed mask, one 0/1 tensor per slot.
    pub fn finetune(
        generator: Generator<T>,
        extractor: FeatureExtractor<T>,
        masks: Vec<Tensor<T>>,
        config: SessionConfig,
    ) -> Result<Self, StepError> {
        let mut s = Self::assemble(Mode::Finetune, generator, extractor, config)?;
        s.set_masks(masks)?;
        Ok(s)
    }

    /// Ordinary dense training of every weight.
    pub fn dense(generator: Generator<T>, extractor: FeatureExtractor<T>, config: SessionConfig) -> Result<Self, StepError> {
        let mut s = Self::assemble(Mode::Dense, generator, extractor, config)?;
        let ones = s.generator.slots().iter().map(|slot| Tensor::ones(&slot.shape)).collect();
        s.set_masks(ones)?;
        Ok(s)
    }

    fn configure_grads(&mut self) {
        let search = self.mode == Mode::Search;
        let slots = self.generator.slots().to_vec();
        let norms = self.generator.norm_params().to_vec();
        let graph = self.generator.graph_mut();
        for (slot, &frozen) in slots.iter().zip(&self.frozen) {
            graph.set_requires_grad(slot.mask, search && !frozen);
            graph.set_requires_grad(slot.weight, !search);
        }
        for p in norms {
            graph.set_requires_grad(p, self.mode == Mode::Dense);
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn generator(&self) -> &Generator<T> {
        &self.generator
    }

    pub fn generator_mut(&mut self) -> &mut Generator<T> {
        &mut self.generator
    }

    pub fn extractor(&self) -> &FeatureExtractor<T> {
        &self.extractor
    }

    pub fn bank(&self) -> &MomentBank<T> {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut MomentBank<T> {
        &mut self.bank
    }

    pub fn scores(&self) -> &ScoreBank<T> {
        &self.scores
    }

    /// Replace the scores (e.g. when resuming); masks are re-selected in search mode.
    pub fn set_scores(&mut self, scores: Vec<Tensor<T>>) -> Result<(), StepError> {
        if scores.len() != self.scores.scores.len()
            || scores.iter().zip(&self.scores.scores).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(PruneError::LayerCount {
                expected: self.scores.scores.len(),
                got: scores.len(),
            }
            .into());
        }
        self.scores.scores = scores;
        if self.mode == Mode::Search {
            self.refresh_masks()?;
        }
        Ok(())
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn masks(&self) -> Vec<Tensor<T>> {
        self.generator.mask_tensors().cloned().collect()
    }

    pub fn set_masks(&mut self, masks: Vec<Tensor<T>>) -> Result<(), StepError> {
        let slots = self.generator.slots().to_vec();
        if masks.len() != slots.len() {
            return Err(PruneError::LayerCount {
                expected: slots.len(),
                got: masks.len(),
            }
            .into());
        }
        for (slot, m) in slots.iter().zip(masks) {
            if m.data().iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(PruneError::NonBinaryMask(slot.layer_id.clone()).into());
            }
            self.generator.graph_mut().set_param(slot.mask, m)?;
        }
        Ok(())
    }

    /// Re-derive the masks from the current scores under the policy.
    pub fn refresh_masks(&mut self) -> Result<(), StepError> {
        let selected = self.config.policy.select(&self.scores.views(), &self.frozen)?;
        let masks = selected
            .into_iter()
            .zip(self.generator.slots())
            .map(|(bits, slot)| {
                let data = bits.into_iter().map(|b| if b { T::one() } else { T::zero() }).collect();
                Tensor::new(&slot.shape, data).expect("mask shape")
            })
            .collect();
        self.set_masks(masks)
    }

    pub fn weights_fingerprint(&self) -> u64 {
        rng::fingerprint(self.generator.weights())
    }

    pub fn masks_fingerprint(&self) -> u64 {
        rng::fingerprint(self.generator.mask_tensors())
    }

    pub fn scores_fingerprint(&self) -> u64 {
        rng::fingerprint(&self.scores.scores)
    }

    /// Number of surviving entries over all slots.
    pub fn surviving(&self) -> usize {
        self.generator
            .mask_tensors()
            .map(|m| m.data().iter().filter(|&&v| v != T::zero()).count())
            .sum()
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// One optimization step on a real batch `real` and latent batch `z`.
    pub fn step(&mut self, real: &Tensor<T>, z: &Tensor<T>) -> Result<StepReport, StepError> {
        let real_taps = self.extractor.extract(real)?;
        if self.config.loss == LossKind::FeatureMatching {
            self.bank.update_real_moments(&real_taps)?;
        }
        if self.mode == Mode::Search {
            self.refresh_masks()?;
        }
        self.generator.forward_all(z)?;
        let taps = self.generator.taps().to_vec();
        let graph = self.generator.graph();
        let fake: Vec<Tensor<T>> = taps
            .iter()
            .map(|&t| graph.value(t).expect("taps evaluated").clone())
            .collect();
        let (loss, tap_grads) = match self.config.loss {
            LossKind::FeatureMatching => {
                let l = self.bank.loss(&fake)?;
                (l.value, l.grads)
            }
            LossKind::KernelMmd => {
                let kernel = self.config.kernel.as_ref().expect("validated");
                let mut total = T::zero();
                let mut grads = Vec::with_capacity(fake.len());
                for (r, f) in real_taps.iter().zip(&fake) {
                    let (v, g) = mmd2_kernel_with_grad(r, f, kernel)?;
                    total = total + v;
                    grads.push(g);
                }
                (total, grads)
            }
        };
        let lr = self.schedule.lr(self.step);
        if !loss.is_finite() {
            return Err(StepError::NonFiniteLoss {
                step: self.step,
                loss: loss.as_f64(),
            });
        }
        let static_mask = self.mode == Mode::Search && self.config.policy.mode == MaskMode::RandomBaseline;
        if !static_mask && lr > 0.0 {
            let seeds: Vec<_> = taps.into_iter().zip(tap_grads).collect();
            let mut grads = self.generator.graph_mut().backward_seeded(&seeds)?;
            let lr_t = T::of(lr);
            let slots = self.generator.slots().to_vec();
            // Collect every update first so a non-finite gradient aborts the
            // step before anything has moved.
            let mut updates: Vec<(usize, Tensor<T>)> = Vec::new();
            match self.mode {
                Mode::Search => {
                    for (i, slot) in slots.iter().enumerate() {
                        if self.frozen[i] {
                            continue;
                        }
                        let mut g = grads.take_param(slot.mask).expect("mask requires grad");
                        if self.config.score_gradient == ScoreGradient::Magnitude {
                            for (gv, &sv) in g.data_mut().iter_mut().zip(self.scores.scores[i].data()) {
                                if sv < T::zero() {
                                    *gv = -*gv;
                                }
                            }
                        }
                        updates.push((i, g));
                    }
                }
                Mode::Finetune | Mode::Dense => {
                    for (i, slot) in slots.iter().enumerate() {
                        updates.push((i, grads.take_param(slot.weight).expect("weight requires grad")));
                    }
                }
            }
            let norms = self.generator.norm_params().to_vec();
            let mut norm_updates = Vec::new();
            if self.mode == Mode::Dense {
                for p in &norms {
                    norm_updates.push(grads.take_param(*p).expect("norm requires grad"));
                }
            }
            if let Some(index) = updates
                .iter()
                .map(|(_, g)| g)
                .chain(&norm_updates)
                .find_map(|g| g.data().iter().position(|v| !v.is_finite()))
            {
                return Err(StepError::Engine(EngineError::NonFiniteGradient { index }));
            }
            for (i, g) in updates {
                match self.mode {
                    Mode::Search => self.scores.states[i].step(&mut self.scores.scores[i], &g, lr_t)?,
                    _ => {
                        let w = self.generator.graph_mut().param_value_mut(slots[i].weight);
                        self.weight_states[i].step(w, &g, lr_t)?;
                    }
                }
            }
            for (i, (p, g)) in norms.into_iter().zip(norm_updates).enumerate() {
                let v = self.generator.graph_mut().param_value_mut(p);
                self.norm_states[i].step(v, &g, lr_t)?;
            }
        }
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss: loss.as_f64(),
            lr,
        })
    }

    /// Generate samples from latents `z`, `chunk` rows at a time.
    pub fn sample(&mut self, z: &Tensor<T>, chunk: usize) -> Result<Tensor<T>, StepError> {
        sample_chunked(&mut self.generator, z, chunk)
    }

    pub fn into_generator(self) -> Generator<T> {
        self.generator
    }
}

/// Run the generator on `z` in chunks and stack the outputs.
pub fn sample_chunked<T: Scalar>(generator: &mut Generator<T>, z: &Tensor<T>, chunk: usize) -> Result<Tensor<T>, StepError> {
    let rows = z.shape()[0];
    let chunk = chunk.max(2);
    let mut parts = Vec::with_capacity(rows.div_ceil(chunk));
    let mut start = 0;
    while start < rows {
        let mut end = (start + chunk).min(rows);
        // Batch statistics need two rows; fold a trailing singleton into its predecessor.
        if rows - end == 1 {
            end = rows;
        }
        parts.push(generator.sample(&z.slice_rows(start, end))?);
        start = end;
    }
    Ok(Tensor::concat_rows(&parts)?)
}
