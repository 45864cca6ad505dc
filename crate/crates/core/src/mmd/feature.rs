use crate::engine::Tensor;
use crate::mmd::MmdError;
use crate::scalar::Scalar;

/// Per-feature mean and population standard deviation of a `[B, F]` matrix.
pub fn column_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (b, f) = x.rows_cols();
    let inv = T::one() / T::of(b as f64);
    let mut mean = vec![T::zero(); f];
    for i in 0..b {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m * inv);
    let mut var = vec![T::zero(); f];
    for i in 0..b {
        for ((s, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            let d = v - m;
            *s = *s + d * d;
        }
    }
    let std = var.into_iter().map(|s| (s * inv).sqrt()).collect();
    (mean, std)
}

/// Value of the mean/std matching loss and its gradient per tap.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLoss<T> {
    pub value: T,
    pub grads: Vec<Tensor<T>>,
}

/// `Σ_j ‖μ_r^j − μ_f^j‖² + ‖σ_r^j − σ_f^j‖²` over taps `j`, where the fake
/// moments come from the `[B, F_j]` matrices in `fake`.
///
/// Where a fake feature has zero spread (up to rounding of its mean) its std
/// term contributes no gradient, since the derivative of the standard
/// deviation is undefined there.
pub fn feature_matching_loss<T: Scalar>(
    real_means: &[&[T]],
    real_stds: &[&[T]],
    fake: &[Tensor<T>],
) -> Result<FeatureLoss<T>, MmdError> {
    if real_means.len() != fake.len() || real_stds.len() != fake.len() {
        return Err(MmdError::DimensionMismatch(format!(
            "{} fake taps but {} real moment vectors",
            fake.len(),
            real_means.len()
        )));
    }
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(fake.len());
    for (j, x) in fake.iter().enumerate() {
        let (b, f) = x.rows_cols();
        if x.rank() != 2 || real_means[j].len() != f || real_stds[j].len() != f {
            return Err(MmdError::DimensionMismatch(format!(
                "tap {j}: fake shape {:?}, real moments of width {}",
                x.shape(),
                real_means[j].len()
            )));
        }
        if b < 2 {
            return Err(MmdError::TooFewSamples { needed: 2, got: b });
        }
        let (mu, sd) = column_moments(x);
        let two = T::of(2.0);
        let inv_b = T::one() / T::of(b as f64);
        // Per-feature coefficients of the mean and std gradient terms.
        let mut cm = vec![T::zero(); f];
        let mut cs = vec![T::zero(); f];
        for k in 0..f {
            let dm = real_means[j][k] - mu[k];
            let ds = real_stds[j][k] - sd[k];
            value = value + dm * dm + ds * ds;
            cm[k] = -two * dm * inv_b;
            // A spread at rounding level is collapsed, not informative.
            let floor = T::of(64.0) * T::epsilon() * mu[k].abs();
            if sd[k] > floor && sd[k] > T::zero() {
                cs[k] = -two * ds * inv_b / sd[k];
            }
        }
        let mut g = vec![T::zero(); b * f];
        for i in 0..b {
            let row = x.row(i);
            let out = &mut g[i * f..(i + 1) * f];
            for k in 0..f {
                out[k] = cm[k] + cs[k] * (row[k] - mu[k]);
            }
        }
        grads.push(Tensor::from_parts(vec![b, f], g));
    }
    Ok(FeatureLoss { value, grads })
}
