use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::rng;
use crate::scalar::Scalar;

/// Weight initializers. Every scheme is fully determined by fan-in, fan-out and seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// i.i.d. `N(0, 2/fan_in)`.
    KaimingNormal,
    /// Each entry `±sqrt(2/fan_in)` with a fair random sign.
    SignedKaimingConstant,
    /// i.i.d. `U(−b, b)` with `b = sqrt(6/(fan_in + fan_out))`.
    XavierUniform,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::KaimingNormal => "kaiming_normal",
            InitScheme::SignedKaimingConstant => "signed_kaiming_constant",
            InitScheme::XavierUniform => "xavier_uniform",
        }
    }
}

impl std::fmt::Display for InitScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn init_weights<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    scheme: InitScheme,
    seed: u64,
) -> Tensor<T> {
    init_with_rng(shape, fan_in, fan_out, scheme, &mut rng::seeded(seed, 0))
}

pub fn init_with_rng<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    scheme: InitScheme,
    rng: &mut impl Rng,
) -> Tensor<T> {
    assert!(fan_in >= 1 && fan_out >= 1, "fan_in and fan_out must be positive");
    let n: usize = shape.iter().product();
    let data: Vec<T> = match scheme {
        InitScheme::KaimingNormal => {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
                .collect()
        }
        InitScheme::SignedKaimingConstant => {
            let sigma = T::of((2.0 / fan_in as f64).sqrt());
            (0..n)
                .map(|_| if rng.random::<bool>() { sigma } else { -sigma })
                .collect()
        }
        InitScheme::XavierUniform => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect()
        }
    };
    Tensor::new(shape, data).expect("initializer shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(t: &Tensor<f64>) -> (f64, f64) {
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn kaiming_normal_std() {
        let t: Tensor<f64> = init_weights(&[1_000_000], 8, 8, InitScheme::KaimingNormal, 1);
        let (_, std) = moments(&t);
        assert!((std - 0.5).abs() / 0.5 < 0.02, "std {std}");
    }

    #[test]
    fn signed_constant_values_and_balance() {
        let t: Tensor<f64> = init_weights(&[1_000_000], 8, 3, InitScheme::SignedKaimingConstant, 2);
        assert!(t.data().iter().all(|&x| x == 0.5 || x == -0.5));
        let pos = t.data().iter().filter(|&&x| x > 0.0).count() as f64 / t.len() as f64;
        assert!((pos - 0.5).abs() < 0.01, "positive fraction {pos}");
    }

    #[test]
    fn xavier_bound() {
        let t: Tensor<f64> = init_weights(&[100_000], 3, 3, InitScheme::XavierUniform, 3);
        assert!(t.data().iter().all(|x| x.abs() <= 1.0));
        let max = t.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max > 0.99);
    }

    #[test]
    fn same_seed_same_weights() {
        let a: Tensor<f64> = init_weights(&[4, 4], 4, 4, InitScheme::KaimingNormal, 9);
        let b: Tensor<f64> = init_weights(&[4, 4], 4, 4, InitScheme::KaimingNormal, 9);
        assert_eq!(a, b);
    }
}
