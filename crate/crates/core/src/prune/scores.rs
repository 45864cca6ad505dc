use crate::engine::{AdamConfig, AdamState, Tensor};
use crate::nets::PrunableSlot;
use crate::rng;
use crate::scalar::Scalar;

/// Scores i.i.d. `U(−b, b)` with `b = sqrt(6/fan_in)`.
pub fn init_scores<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    rng::uniform(&mut rng::seeded(seed, 0), shape, -bound, bound)
}

/// One score tensor and its optimizer state per prunable slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBank<T> {
    pub scores: Vec<Tensor<T>>,
    pub states: Vec<AdamState<T>>,
}

impl<T: Scalar> ScoreBank<T> {
    pub fn init(slots: &[PrunableSlot], seed: u64, adam: AdamConfig) -> Self {
        let scores: Vec<Tensor<T>> = slots
            .iter()
            .enumerate()
            .map(|(i, s)| init_scores(&s.shape, s.fan_in, rng::mix(seed, i as u64)))
            .collect();
        let states = scores.iter().map(|s| AdamState::new(s.shape(), adam)).collect();
        Self { scores, states }
    }

    pub fn views(&self) -> Vec<&[T]> {
        self.scores.iter().map(Tensor::data).collect()
    }
}

/// Pack a 0/1 tensor into bytes, least significant bit first.
pub fn pack_mask<T: Scalar>(mask: &Tensor<T>) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &v) in mask.data().iter().enumerate() {
        if v != T::zero() {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

/// Inverse of [`pack_mask`]; `None` when the byte count does not fit the shape.
pub fn unpack_mask<T: Scalar>(bytes: &[u8], shape: &[usize]) -> Option<Tensor<T>> {
    let n: usize = shape.iter().product();
    if bytes.len() != n.div_ceil(8) {
        return None;
    }
    let data = (0..n)
        .map(|i| if bytes[i / 8] >> (i % 8) & 1 == 1 { T::one() } else { T::zero() })
        .collect();
    Tensor::new(shape, data).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_bounded_and_reproducible() {
        let a: Tensor<f64> = init_scores(&[1000], 6, 4);
        let b: Tensor<f64> = init_scores(&[1000], 6, 4);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|s| s.abs() <= 1.0));
    }

    #[test]
    fn mask_bits_round_trip() {
        let m = Tensor::new(&[11], vec![1.0f64, 0., 0., 1., 1., 0., 0., 0., 1., 0., 1.]).unwrap();
        let bytes = pack_mask(&m);
        assert_eq!(bytes, vec![0b0001_1001, 0b0000_0101]);
        assert_eq!(unpack_mask::<f64>(&bytes, &[11]).unwrap(), m);
        assert!(unpack_mask::<f64>(&bytes, &[17]).is_none());
    }
}
