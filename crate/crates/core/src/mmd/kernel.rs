use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::mmd::MmdError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Rbf,
    RbfMixture,
}

/// Gaussian kernel `ψ(x, y) = Σ_σ exp(−|x − y|² / 2σ²)` over the listed bandwidths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidths: Vec<f64>,
}

impl KernelSpec {
    pub fn rbf(sigma: f64) -> Self {
        Self {
            kind: KernelKind::Rbf,
            bandwidths: vec![sigma],
        }
    }

    /// Mixture with bandwidths `multipliers × scale`.
    pub fn mixture(scale: f64, multipliers: &[f64]) -> Self {
        Self {
            kind: KernelKind::RbfMixture,
            bandwidths: multipliers.iter().map(|m| m * scale).collect(),
        }
    }

    /// Bandwidths `{0.25, 0.5, 1, 2, 4} × median` used for evaluation.
    pub fn median_mixture(median: f64) -> Self {
        Self::mixture(median, &[0.25, 0.5, 1.0, 2.0, 4.0])
    }

    pub fn validate(&self) -> Result<(), MmdError> {
        if self.bandwidths.is_empty() || self.bandwidths.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(MmdError::InvalidKernel(format!(
                "bandwidths must be positive and non-empty, got {:?}",
                self.bandwidths
            )));
        }
        if self.kind == KernelKind::Rbf && self.bandwidths.len() != 1 {
            return Err(MmdError::InvalidKernel("rbf takes exactly one bandwidth".into()));
        }
        Ok(())
    }

    fn coefficients<T: Scalar>(&self) -> Vec<T> {
        self.bandwidths.iter().map(|&s| T::of(-0.5 / (s * s))).collect()
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

fn check_pair<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<(usize, usize, usize), MmdError> {
    if real.rank() != 2 || fake.rank() != 2 {
        return Err(MmdError::DimensionMismatch(format!(
            "samples must be matrices, got {:?} and {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let (n, d) = real.rows_cols();
    let (m, d2) = fake.rows_cols();
    if d != d2 {
        return Err(MmdError::DimensionMismatch(format!("real has {d} features, fake has {d2}")));
    }
    Ok((n, m, d))
}

/// Mean of `ψ` over all pairs `(a_i, b_j)`; `symmetric` halves the work when `a == b`.
fn mean_kernel<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, coef: &[T], symmetric: bool) -> T {
    let (n, _) = a.rows_cols();
    let (m, _) = b.rows_cols();
    let psi = |d2: T| coef.iter().fold(T::zero(), |acc, &c| acc + (c * d2).exp());
    let mut total = T::zero();
    if symmetric {
        let diag = psi(T::zero());
        for i in 0..n {
            let mut row = T::zero();
            for j in i + 1..n {
                row = row + psi(sq_dist(a.row(i), a.row(j)));
            }
            total = total + row + row + diag;
        }
    } else {
        for i in 0..n {
            let mut row = T::zero();
            for j in 0..m {
                row = row + psi(sq_dist(a.row(i), b.row(j)));
            }
            total = total + row;
        }
    }
    total / T::of((n * m) as f64)
}

/// Biased (V-statistic) squared MMD between the rows of `real` and `fake`,
/// clamped at zero.
pub fn mmd2_kernel<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, kernel: &KernelSpec) -> Result<T, MmdError> {
    kernel.validate()?;
    check_pair(real, fake)?;
    let coef = kernel.coefficients::<T>();
    let rr = mean_kernel(real, real, &coef, true);
    let ff = mean_kernel(fake, fake, &coef, true);
    let rf = mean_kernel(real, fake, &coef, false);
    Ok((rr - (rf + rf) + ff).max(T::zero()))
}

/// Squared MMD and its gradient with respect to every fake sample.
pub fn mmd2_kernel_with_grad<T: Scalar>(
    real: &Tensor<T>,
    fake: &Tensor<T>,
    kernel: &KernelSpec,
) -> Result<(T, Tensor<T>), MmdError> {
    kernel.validate()?;
    let (n, m, d) = check_pair(real, fake)?;
    let coef = kernel.coefficients::<T>();
    let value = mmd2_kernel(real, fake, kernel)?;
    let two = T::of(2.0);
    // ∂ψ(x, y)/∂x = Σ_σ 2c_σ exp(c_σ|x−y|²) (x − y), with c_σ = −1/2σ².
    let dpsi = |d2: T| coef.iter().fold(T::zero(), |acc, &c| acc + two * c * (c * d2).exp());
    let w_ff = two / T::of((m * m) as f64);
    let w_rf = two / T::of((n * m) as f64);
    let mut grad = vec![T::zero(); m * d];
    for j in 0..m {
        let fj = fake.row(j);
        let g = &mut grad[j * d..(j + 1) * d];
        for jj in 0..m {
            if jj == j {
                continue;
            }
            let fo = fake.row(jj);
            let s = w_ff * dpsi(sq_dist(fj, fo));
            for t in 0..d {
                g[t] = g[t] + s * (fj[t] - fo[t]);
            }
        }
        for i in 0..n {
            let r = real.row(i);
            let s = w_rf * dpsi(sq_dist(fj, r));
            for t in 0..d {
                g[t] = g[t] - s * (fj[t] - r[t]);
            }
        }
    }
    Ok((value, Tensor::from_parts(vec![m, d], grad)))
}

/// Median Euclidean distance over all distinct row pairs of the first
/// `max_rows` rows.
pub fn median_pairwise_distance<T: Scalar>(x: &Tensor<T>, max_rows: usize) -> Result<f64, MmdError> {
    let (n, _) = x.rows_cols();
    let n = n.min(max_rows);
    if x.rank() != 2 || n < 2 {
        return Err(MmdError::TooFewSamples { needed: 2, got: n });
    }
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(x.row(i), x.row(j)).as_f64().sqrt());
        }
    }
    let mid = d.len() / 2;
    let (_, &mut upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let median = if d.len() % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if median > 0.0 {
        Ok(median)
    } else {
        Err(MmdError::InvalidKernel("all sampled points coincide; median distance is zero".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_points_closed_form() {
        let r = Tensor::new(&[1, 1], vec![0.0f64]).unwrap();
        let f = Tensor::new(&[1, 1], vec![1.0f64]).unwrap();
        let v = mmd2_kernel(&r, &f, &KernelSpec::rbf(1.0)).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn identical_sets_vanish() {
        let x = Tensor::new(&[3, 2], vec![0.1f64, 0.5, -1.0, 2.0, 0.3, 0.3]).unwrap();
        assert!(mmd2_kernel(&x, &x, &KernelSpec::median_mixture(1.0)).unwrap() < 1e-12);
    }

    #[test]
    fn median_of_three_points() {
        let x = Tensor::new(&[3, 1], vec![0.0f64, 1.0, 3.0]).unwrap();
        assert_eq!(median_pairwise_distance(&x, 10).unwrap(), 2.0);
        let y = Tensor::new(&[4, 1], vec![0.0f64, 1.0, 3.0, 6.0]).unwrap();
        // distances 1 2 3 3 5 6
        assert_eq!(median_pairwise_distance(&y, 10).unwrap(), 3.0);
    }

    #[test]
    fn rejects_bad_bandwidths() {
        assert!(KernelSpec::rbf(0.0).validate().is_err());
        assert!(KernelSpec {
            kind: KernelKind::Rbf,
            bandwidths: vec![1.0, 2.0]
        }
        .validate()
        .is_err());
    }
}
