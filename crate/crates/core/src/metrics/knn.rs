use crate::engine::Tensor;
use crate::metrics::MetricsError;
use crate::scalar::Scalar;

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum()
}

fn check<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<(), MetricsError> {
    let n = x.rows_cols().0;
    if k == 0 {
        return Err(MetricsError::InvalidK { k, size: n });
    }
    if x.rank() != 2 || k >= n {
        return Err(MetricsError::InvalidK { k, size: n });
    }
    if !x.is_finite() {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

/// Squared distance from every row to its `k`-th nearest other row.
pub fn kth_neighbor_sq_radii<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Vec<f64>, MetricsError> {
    check(x, k)?;
    let n = x.rows_cols().0;
    let mut row = vec![0.0; n - 1];
    Ok((0..n)
        .map(|i| {
            let mut w = 0;
            for j in 0..n {
                if j != i {
                    row[w] = sq_dist(x.row(i), x.row(j));
                    w += 1;
                }
            }
            *row.select_nth_unstable_by(k - 1, f64::total_cmp).1
        })
        .collect())
}

/// Fraction of `points` lying in at least one closed ball `(center_i, radius_i)`.
fn fraction_inside<T: Scalar>(points: &Tensor<T>, centers: &Tensor<T>, sq_radii: &[f64]) -> f64 {
    let (m, _) = points.rows_cols();
    let (n, _) = centers.rows_cols();
    let hits = (0..m)
        .filter(|&j| (0..n).any(|i| sq_dist(points.row(j), centers.row(i)) <= sq_radii[i]))
        .count();
    hits as f64 / m as f64
}

fn same_width<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<(), MetricsError> {
    let (a, b) = (real.rows_cols().1, fake.rows_cols().1);
    if a != b || real.rank() != 2 || fake.rank() != 2 {
        return Err(MetricsError::DimensionMismatch { real: a, fake: b });
    }
    Ok(())
}

/// k-NN manifold precision and recall.
pub fn precision_recall<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, k: usize) -> Result<(f64, f64), MetricsError> {
    same_width(real, fake)?;
    let real_r = kth_neighbor_sq_radii(real, k)?;
    let fake_r = kth_neighbor_sq_radii(fake, k)?;
    Ok((fraction_inside(fake, real, &real_r), fraction_inside(real, fake, &fake_r)))
}

/// Density and coverage with respect to the real set's k-NN balls.
pub fn density_coverage<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, k: usize) -> Result<(f64, f64), MetricsError> {
    same_width(real, fake)?;
    let radii = kth_neighbor_sq_radii(real, k)?;
    if !fake.is_finite() {
        return Err(MetricsError::NonFinite);
    }
    let (n, _) = real.rows_cols();
    let (m, _) = fake.rows_cols();
    let mut covered = vec![false; n];
    let mut count = 0usize;
    for j in 0..m {
        for (i, c) in covered.iter_mut().enumerate() {
            if sq_dist(fake.row(j), real.row(i)) <= radii[i] {
                count += 1;
                *c = true;
            }
        }
    }
    let density = count as f64 / (k * m) as f64;
    let coverage = covered.iter().filter(|&&c| c).count() as f64 / n as f64;
    Ok((density, coverage))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::new(&[v.len(), 2], v.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn interleaved_pairs() {
        let real = pts(&[[0.0, 0.0], [2.0, 0.0]]);
        let fake = pts(&[[1.0, 0.0], [3.0, 0.0]]);
        assert_eq!(precision_recall(&real, &fake, 1).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn density_can_exceed_one() {
        let real = pts(&[[0.0, 0.0], [1.0, 0.0]]);
        let fake = pts(&[[0.0, 0.0]]);
        assert_eq!(density_coverage(&real, &fake, 1).unwrap(), (2.0, 1.0));
    }

    #[test]
    fn k_must_be_below_set_size() {
        let real = pts(&[[0.0, 0.0], [1.0, 0.0]]);
        assert!(precision_recall(&real, &real, 2).is_err());
    }
}
