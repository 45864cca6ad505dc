use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::engine::Tensor;
use crate::metrics::MetricsError;
use crate::scalar::Scalar;

/// Mean and `1/(N−1)` sample covariance of the rows of a `[N, d]` matrix.
pub fn gaussian_fit<T: Scalar>(x: &Tensor<T>) -> Result<(DVector<f64>, DMatrix<f64>), MetricsError> {
    let (n, d) = x.rows_cols();
    if x.rank() != 2 || n < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, got: n });
    }
    if !x.is_finite() {
        return Err(MetricsError::NonFinite);
    }
    let m = DMatrix::from_fn(n, d, |i, j| x.data()[i * d + j].as_f64());
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from round-off are clamped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits given as mean and covariance.
///
/// `Tr((C1 C2)^{1/2})` is computed as `Tr((S C2 S)^{1/2})` with `S = C1^{1/2}`,
/// whose argument is symmetric and has the same spectrum.
pub fn frechet_from_moments(mu1: &DVector<f64>, c1: &DMatrix<f64>, mu2: &DVector<f64>, c2: &DMatrix<f64>) -> f64 {
    let s = psd_sqrt(c1);
    let inner = &s * c2 * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = (mu1 - mu2).norm_squared();
    (diff + c1.trace() + c2.trace() - 2.0 * cross).max(0.0)
}

/// Fréchet distance between the Gaussian fits of two feature sets.
pub fn frechet_distance<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<f64, MetricsError> {
    if real.rows_cols().1 != fake.rows_cols().1 {
        return Err(MetricsError::DimensionMismatch {
            real: real.rows_cols().1,
            fake: fake.rows_cols().1,
        });
    }
    let (mu1, c1) = gaussian_fit(real)?;
    let (mu2, c2) = gaussian_fit(fake)?;
    Ok(frechet_from_moments(&mu1, &c1, &mu2, &c2))
}
