use serde::{Deserialize, Serialize};

use crate::engine::{AdamConfig, AdamState, Tensor};
use crate::mmd::{column_moments, FeatureLoss, MmdError};
use crate::scalar::Scalar;

/// Moving-average settings for the real-data moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_ema_lr")]
    pub ema_lr: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    /// Start the estimates at the first real batch's moments instead of zero.
    #[serde(default = "default_warm_start")]
    pub warm_start: bool,
}

fn default_beta1() -> f64 {
    1e-5
}
fn default_beta2() -> f64 {
    0.999
}
fn default_ema_lr() -> f64 {
    1e-3
}
fn default_eps() -> f64 {
    1e-8
}
fn default_warm_start() -> bool {
    true
}

impl Default for MomentConfig {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            beta2: default_beta2(),
            ema_lr: default_ema_lr(),
            epsilon: default_eps(),
            warm_start: default_warm_start(),
        }
    }
}

impl MomentConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            base_lr: self.ema_lr,
        }
    }
}

/// Running per-tap mean and std of real features, each tracked by Adam on
/// the pseudo-gradient `estimate − batch moment`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentBank<T> {
    pub config: MomentConfig,
    pub means: Vec<Tensor<T>>,
    pub stds: Vec<Tensor<T>>,
    pub mean_states: Vec<AdamState<T>>,
    pub std_states: Vec<AdamState<T>>,
    /// Number of real batches absorbed so far.
    pub updates: u64,
}

impl<T: Scalar> MomentBank<T> {
    pub fn new(tap_widths: &[usize], config: MomentConfig) -> Self {
        let zeros = || tap_widths.iter().map(|&w| Tensor::zeros(&[w])).collect::<Vec<_>>();
        let states = || {
            tap_widths
                .iter()
                .map(|&w| AdamState::new(&[w], config.adam()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            means: zeros(),
            stds: zeros(),
            mean_states: states(),
            std_states: states(),
            updates: 0,
        }
    }

    pub fn tap_widths(&self) -> Vec<usize> {
        self.means.iter().map(Tensor::len).collect()
    }

    /// Fold one real batch (one `[B, F_j]` matrix per tap) into the estimates.
    pub fn update_real_moments(&mut self, taps: &[Tensor<T>]) -> Result<(), MmdError> {
        let widths = self.tap_widths();
        if taps.len() != widths.len() || taps.iter().zip(&widths).any(|(t, &w)| t.rank() != 2 || t.rows_cols().1 != w) {
            return Err(MmdError::DimensionMismatch(format!(
                "moment bank tracks widths {widths:?}, batch has shapes {:?}",
                taps.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        let warm = self.config.warm_start && self.updates == 0;
        let lr = T::of(self.config.ema_lr);
        for (j, x) in taps.iter().enumerate() {
            let (mu, sd) = column_moments(x);
            if warm {
                self.means[j] = Tensor::vector(mu);
                self.stds[j] = Tensor::vector(sd);
                continue;
            }
            for (est, state, target) in [
                (&mut self.means[j], &mut self.mean_states[j], mu),
                (&mut self.stds[j], &mut self.std_states[j], sd),
            ] {
                let g: Vec<T> = est.data().iter().zip(&target).map(|(&p, &c)| p - c).collect();
                state.step(est, &Tensor::vector(g), lr)?;
            }
            for s in self.stds[j].data_mut() {
                *s = s.max(T::zero());
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// Feature-matching loss of fake taps against the current estimates.
    pub fn loss(&self, fake: &[Tensor<T>]) -> Result<FeatureLoss<T>, MmdError> {
        let means: Vec<&[T]> = self.means.iter().map(Tensor::data).collect();
        let stds: Vec<&[T]> = self.stds.iter().map(Tensor::data).collect();
        crate::mmd::feature_matching_loss(&means, &stds, fake)
    }
}
