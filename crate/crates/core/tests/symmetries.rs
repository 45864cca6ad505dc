use proptest::prelude::*;
use slt_core::engine::Tensor;
use slt_core::metrics::{density_coverage, frechet_distance, precision_recall};
use slt_core::mmd::{mmd2_kernel, KernelSpec};
use slt_core::rng;

fn cloud(seed: u64, n: usize, d: usize, shift: f64) -> Tensor<f64> {
    rng::standard_normal::<f64>(&mut rng::seeded(seed, 0), &[n, d]).map(|x| x + shift)
}

fn translate(x: &Tensor<f64>, t: &[f64]) -> Tensor<f64> {
    let d = t.len();
    let data = x.data().iter().enumerate().map(|(i, v)| v + t[i % d]).collect();
    Tensor::new(x.shape(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mmd_is_symmetric(seed in any::<u64>(), n in 2usize..40, m in 2usize..40, d in 1usize..5, shift in -2.0f64..2.0) {
        let (a, b) = (cloud(seed, n, d, 0.0), cloud(seed ^ 7, m, d, shift));
        let k = KernelSpec::mixture(1.0, &[0.5, 1.0, 2.0]);
        let ab = mmd2_kernel(&a, &b, &k).unwrap();
        let ba = mmd2_kernel(&b, &a, &k).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1.0));
    }

    #[test]
    fn frechet_is_symmetric(seed in any::<u64>(), n in 8usize..60, d in 1usize..5, shift in -2.0f64..2.0) {
        let (a, b) = (cloud(seed, n, d, 0.0), cloud(seed ^ 7, n + 3, d, shift));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.abs().max(1.0), "{} vs {}", ab, ba);
    }

    #[test]
    fn knn_metrics_are_translation_invariant(seed in any::<u64>(), n in 5usize..60, d in 1usize..4, k in 1usize..4) {
        let (real, fake) = (cloud(seed, n, d, 0.0), cloud(seed ^ 3, n, d, 0.3));
        let t: Vec<f64> = (0..d).map(|i| (i as f64 + 1.0) * 0.25 - 0.5).collect();
        let (rt, ft) = (translate(&real, &t), translate(&fake, &t));
        prop_assert_eq!(precision_recall(&real, &fake, k).unwrap(), precision_recall(&rt, &ft, k).unwrap());
        prop_assert_eq!(density_coverage(&real, &fake, k).unwrap(), density_coverage(&rt, &ft, k).unwrap());
    }

    #[test]
    fn metrics_of_a_set_against_itself(seed in any::<u64>(), n in 8usize..50, d in 1usize..4) {
        let a = cloud(seed, n, d, 0.0);
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
        prop_assert!(mmd2_kernel(&a, &a, &KernelSpec::rbf(1.0)).unwrap().abs() < 1e-12);
        prop_assert_eq!(precision_recall(&a, &a, 2).unwrap(), (1.0, 1.0));
        prop_assert_eq!(density_coverage(&a, &a, 2).unwrap().1, 1.0);
    }
}
