//! Production numerics against independent reference implementations.
//!
//! Checks are plain `pub fn`s wrapped as tests at the bottom, so the
//! acceptance binary can call them too.

use std::collections::HashMap;

use rand::Rng;
use slt_core::engine::kernels::{self, ConvGeometry};
use slt_core::engine::{BatchNormMode, Graph, Tensor};
use slt_core::metrics::{density_coverage, frechet_distance, precision_recall};
use slt_core::mmd::{feature_matching_loss, mmd2_kernel, KernelSpec};
use slt_core::rng::{self, SeededRng};

fn normal(r: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    rng::standard_normal(r, shape)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

// ---- closed forms ----

pub fn mmd_of_two_points() {
    let v = mmd2_kernel(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[1.0]), &KernelSpec::rbf(1.0)).unwrap();
    assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-9, "{v}");
}

pub fn frechet_one_dimensional() {
    // Sets with sample moments (0, 1) and (1, 4) under the 1/(N-1) estimator.
    let a = t(&[2, 1], &[-(0.5f64).sqrt(), (0.5f64).sqrt()]);
    let b = t(&[2, 1], &[1.0 - 2.0f64.sqrt(), 1.0 + 2.0f64.sqrt()]);
    let fd = frechet_distance(&a, &b).unwrap();
    assert!((fd - 2.0).abs() < 1e-8, "{fd}");
}

pub fn feature_matching_identity_cases() {
    let l = feature_matching_loss(&[&[0.0]], &[&[1.0]], &[t(&[2, 1], &[-1.0, 1.0])]).unwrap();
    assert_eq!(l.value, 0.0);
    let l = feature_matching_loss(&[&[0.0]], &[&[1.0]], &[t(&[2, 1], &[0.0, 0.0])]).unwrap();
    assert_eq!(l.value, 1.0);
}

pub fn feature_matching_direct_formula() {
    for seed in 0..20 {
        let mut r = rng::seeded(seed, 1);
        let (b, f) = (r.random_range(2..8), r.random_range(1..5));
        let x = normal(&mut r, &[b, f]);
        let mu = normal(&mut r, &[f]);
        let sd = normal(&mut r, &[f]).map(f64::abs);
        let mut expect = 0.0;
        for k in 0..f {
            let col: Vec<f64> = (0..b).map(|i| x.data()[i * f + k]).collect();
            let m = col.iter().sum::<f64>() / b as f64;
            let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / b as f64).sqrt();
            expect += (mu.data()[k] - m).powi(2) + (sd.data()[k] - s).powi(2);
        }
        let got = feature_matching_loss(&[mu.data()], &[sd.data()], &[x]).unwrap().value;
        assert!((got - expect).abs() < 1e-12);
    }
}

// ---- convolution ----

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    t(&[n, o, oh, ow], &out)
}

fn graph_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let xi = g.input("x", false);
    let wc = g.constant(w.clone());
    let y = g.conv2d(xi, wc, stride, pad);
    let feeds = HashMap::from([("x".to_string(), x.clone())]);
    g.forward_to(&feeds, y).unwrap().clone()
}

pub fn conv_delta_kernel_and_box_sum() {
    let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let mut delta = vec![0.0; 9];
    delta[4] = 1.0;
    assert_eq!(graph_conv(&x, &t(&[1, 1, 3, 3], &delta), 1, 1), x);
    let y = graph_conv(&Tensor::ones(&[1, 1, 4, 4]), &Tensor::ones(&[1, 1, 3, 3]), 1, 0);
    assert_eq!(y, Tensor::full(&[1, 1, 2, 2], 9.0));
}

pub fn conv_matches_naive_loops() {
    for seed in 0..40 {
        let mut r = rng::seeded(seed, 2);
        let (n, c, o) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let k = r.random_range(1..5);
        let (stride, pad) = (r.random_range(1..3), r.random_range(0..2));
        // Sizes the stride divides evenly.
        let out = r.random_range(1..4usize);
        let h = ((out - 1) * stride + k).saturating_sub(2 * pad).max(1);
        let h = h + (stride - (h + 2 * pad - k) % stride) % stride;
        let wd = h + stride;
        let x = normal(&mut r, &[n, c, h, wd]);
        let w = normal(&mut r, &[o, c, k, k]);
        let fast = graph_conv(&x, &w, stride, pad);
        let slow = naive_conv(&x, &w, stride, pad);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) < 1e-12, "seed {seed}");
        let g = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel_h: k,
            kernel_w: k,
            stride,
            padding: pad,
            out_h: slow.shape()[2],
            out_w: slow.shape()[3],
        };
        let raw = kernels::conv2d(x.data(), w.data(), n, o, &g);
        assert!(raw.iter().zip(slow.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

// ---- small op examples ----

fn run1(build: impl FnOnce(&mut Graph<f64>, slt_core::engine::NodeId) -> slt_core::engine::NodeId, x: Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let xi = g.input("x", false);
    let y = build(&mut g, xi);
    g.forward_to(&HashMap::from([("x".to_string(), x)]), y).unwrap().clone()
}

pub fn small_op_examples() {
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let y = run1(|g, x| {
        let e = g.constant(eye);
        g.matmul(e, x)
    }, t(&[2, 1], &[3.0, 4.0]));
    assert_eq!(y.data(), &[3.0, 4.0]);
    assert_eq!(run1(|g, x| g.relu(x), Tensor::vector(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
    let up = run1(|g, x| g.upsample2x(x), t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(
        up.data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
}

fn bn(x: Tensor<f64>, gamma: f64, beta: f64, mode: BatchNormMode<f64>) -> Tensor<f64> {
    run1(|g, x| {
        let gm = g.constant(Tensor::vector(vec![gamma]));
        let bt = g.constant(Tensor::vector(vec![beta]));
        g.batchnorm(x, gm, bt, mode, 0.0)
    }, x)
}

pub fn batchnorm_examples() {
    let fixed = |m: f64, v: f64| BatchNormMode::Fixed { mean: vec![m], var: vec![v] };
    let x = t(&[3, 1], &[0.5, -2.0, 7.0]);
    assert_eq!(bn(x.clone(), 1.0, 0.0, fixed(0.0, 1.0)), x);
    assert_eq!(bn(t(&[2, 1], &[-1.0, 1.0]), 1.0, 0.0, BatchNormMode::BatchStats).data(), &[-1.0, 1.0]);
    assert_eq!(bn(t(&[1, 1], &[5.0]), 2.0, 3.0, fixed(1.0, 4.0)).data(), &[7.0]);
}

pub fn disconnected_input_has_zero_gradient() {
    let mut g = Graph::new();
    let x = g.input("x", true);
    let c = g.constant(Tensor::scalar(3.0));
    let l = g.sum(c);
    let _ = x;
    g.forward(&HashMap::from([("x".to_string(), Tensor::vector(vec![1.0, 2.0]))])).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.input("x").map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
}

// ---- kernel MMD ----

fn naive_mmd2(x: &Tensor<f64>, y: &Tensor<f64>, sigmas: &[f64]) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        sigmas.iter().map(|s| (-d / (2.0 * s * s)).exp()).sum::<f64>()
    };
    let (n, m) = (x.rows_cols().0, y.rows_cols().0);
    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            xx += k(x.row(i), x.row(j));
        }
    }
    for i in 0..m {
        for j in 0..m {
            yy += k(y.row(i), y.row(j));
        }
    }
    for i in 0..n {
        for j in 0..m {
            xy += k(x.row(i), y.row(j));
        }
    }
    (xx / (n * n) as f64 + yy / (m * m) as f64 - 2.0 * xy / (n * m) as f64).max(0.0)
}

pub fn mmd_matches_double_loop() {
    for seed in 0..30 {
        let mut r = rng::seeded(seed, 3);
        let x = normal(&mut r, &[5, 3]);
        let y = normal(&mut r, &[7, 3]).map(|v| v * 1.5 + 0.3);
        let sigmas = [0.5, 1.0, 2.0];
        let got = mmd2_kernel(&x, &y, &KernelSpec::mixture(1.0, &sigmas)).unwrap();
        assert!((got - naive_mmd2(&x, &y, &sigmas)).abs() < 1e-12, "seed {seed}");
        assert!(mmd2_kernel(&x, &x, &KernelSpec::rbf(1.0)).unwrap().abs() < 1e-12);
    }
}

// ---- Fréchet ----

pub fn frechet_diagonal_closed_form() {
    for seed in 0..10 {
        let mut r = rng::seeded(seed, 4);
        // Axis-aligned sets: each coordinate varies in its own rows, so the
        // sample covariance is exactly diagonal.
        let build = |r: &mut SeededRng| {
            let mut rows = vec![0.0; 12 * 3];
            let mu: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let sd: Vec<f64> = (0..3).map(|_| r.random_range(0.2..3.0)).collect();
            for d in 0..3 {
                for s in [-1.0, 1.0] {
                    let row = d * 4 + if s < 0.0 { 0 } else { 1 };
                    for (k, m) in mu.iter().enumerate() {
                        rows[row * 3 + k] = *m;
                    }
                    rows[row * 3 + d] += s * sd[d];
                }
            }
            // Pad with copies of the mean so every row set has 12 rows.
            for row in [2, 3, 6, 7, 10, 11] {
                for (k, m) in mu.iter().enumerate() {
                    rows[row * 3 + k] = *m;
                }
            }
            (t(&[12, 3], &rows), mu, sd)
        };
        let (a, mu1, s1) = build(&mut r);
        let (b, mu2, s2) = build(&mut r);
        // Sample variance per axis: 2·sd² / 11.
        let expect: f64 = (0..3)
            .map(|d| {
                let (v1, v2) = (2.0 * s1[d] * s1[d] / 11.0, 2.0 * s2[d] * s2[d] / 11.0);
                (mu1[d] - mu2[d]).powi(2) + (v1.sqrt() - v2.sqrt()).powi(2)
            })
            .sum();
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-8, "seed {seed}: {got} vs {expect}");
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        assert!((frechet_distance(&b, &a).unwrap() - got).abs() < 1e-10);
    }
}

// ---- k-NN metrics ----

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// k-th smallest distance to another row, by full sort.
fn radius(x: &Tensor<f64>, i: usize, k: usize) -> f64 {
    let mut d: Vec<f64> = (0..x.rows_cols().0).filter(|&j| j != i).map(|j| d2(x.row(i), x.row(j))).collect();
    d.sort_by(f64::total_cmp);
    d[k - 1]
}

fn brute(real: &Tensor<f64>, fake: &Tensor<f64>, k: usize) -> [f64; 4] {
    let (n, m) = (real.rows_cols().0, fake.rows_cols().0);
    let rr: Vec<f64> = (0..n).map(|i| radius(real, i, k)).collect();
    let fr: Vec<f64> = (0..m).map(|j| radius(fake, j, k)).collect();
    let mut prec = 0;
    let mut dens = 0usize;
    for j in 0..m {
        let mut any = false;
        for i in 0..n {
            if d2(fake.row(j), real.row(i)) <= rr[i] {
                any = true;
                dens += 1;
            }
        }
        prec += any as usize;
    }
    let mut rec = 0;
    let mut cov = 0;
    for i in 0..n {
        rec += (0..m).any(|j| d2(real.row(i), fake.row(j)) <= fr[j]) as usize;
        cov += (0..m).any(|j| d2(real.row(i), fake.row(j)) <= rr[i]) as usize;
    }
    [
        prec as f64 / m as f64,
        rec as f64 / n as f64,
        dens as f64 / (k * m) as f64,
        cov as f64 / n as f64,
    ]
}

pub fn knn_metrics_match_brute_force() {
    for seed in 0..12 {
        let mut r = rng::seeded(seed, 5);
        let (n, m) = (r.random_range(5..200), r.random_range(5..200));
        let dim = r.random_range(1..5);
        let k = r.random_range(1..5);
        // Integer grid coordinates produce many exact boundary ties.
        let grid = seed % 2 == 0;
        let mut draw = |rows: usize, shift: f64| {
            let v: Vec<f64> = (0..rows * dim)
                .map(|_| if grid { r.random_range(0..6) as f64 + shift } else { r.random::<f64>() * 3.0 + shift })
                .collect();
            t(&[rows, dim], &v)
        };
        let real = draw(n, 0.0);
        let fake = draw(m, if grid { 1.0 } else { 0.5 });
        let (p, rc) = precision_recall(&real, &fake, k).unwrap();
        let (d, c) = density_coverage(&real, &fake, k).unwrap();
        assert_eq!([p, rc, d, c], brute(&real, &fake, k), "seed {seed}");
        let (rp, rr) = precision_recall(&fake, &real, k).unwrap();
        assert_eq!((rp, rr), (rc, p));
    }
}

pub fn knn_examples() {
    let real = t(&[2, 2], &[0.0, 0.0, 2.0, 0.0]);
    let fake = t(&[2, 2], &[1.0, 0.0, 3.0, 0.0]);
    assert_eq!(precision_recall(&real, &fake, 1).unwrap(), (1.0, 1.0));
    let real = t(&[2, 2], &[0.0, 0.0, 1.0, 0.0]);
    let fake = t(&[1, 2], &[0.0, 0.0]);
    assert_eq!(density_coverage(&real, &fake, 1).unwrap(), (2.0, 1.0));
    let mut r = rng::seeded(9, 9);
    let x = normal(&mut r, &[30, 2]);
    assert_eq!(precision_recall(&x, &x, 1).unwrap(), (1.0, 1.0));
    assert_eq!(density_coverage(&x, &x, 1).unwrap().1, 1.0);
    let unit = rng::uniform::<f64>(&mut r, &[40, 2], 0.0, 1.0);
    let far = unit.map(|v| v + 100.0);
    assert_eq!(precision_recall(&unit, &far, 3).unwrap(), (0.0, 0.0));
    assert_eq!(density_coverage(&unit, &far, 3).unwrap(), (0.0, 0.0));
}

mod tests {
    macro_rules! wrap {
        ($($check:ident),* $(,)?) => {
            $(#[test]
            fn $check() {
                super::$check()
            })*
        };
    }

    wrap!(
        mmd_of_two_points,
        frechet_one_dimensional,
        feature_matching_identity_cases,
        feature_matching_direct_formula,
        conv_delta_kernel_and_box_sum,
        conv_matches_naive_loops,
        small_op_examples,
        batchnorm_examples,
        disconnected_input_has_zero_gradient,
        mmd_matches_double_loop,
        frechet_diagonal_closed_form,
        knn_metrics_match_brute_force,
        knn_examples,
    );
}
