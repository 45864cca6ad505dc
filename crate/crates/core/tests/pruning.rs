use proptest::prelude::*;
use slt_core::engine::Tensor;
use slt_core::mmd::{mmd2_kernel, KernelSpec};
use slt_core::nets::{FeatureExtractor, FeatureExtractorSpec, Generator, GeneratorSpec, InitScheme};
use slt_core::prune::{init_scores, LossKind, MaskMode, MaskPolicy, Session, SessionConfig};
use slt_core::engine::AdamConfig;
use slt_core::rng;

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

fn expected_keep(k: u32, n: usize) -> usize {
    ((k as f64 / 100.0 * n as f64).round() as usize).clamp(1, n)
}

fn scores(seed: u64, n: usize) -> Vec<f64> {
    rng::standard_normal::<f64>(&mut rng::seeded(seed, 0), &[n]).into_data()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn per_layer_keeps_exactly_round_k_n(k in 1u32..=100, n in 1usize..=1000, seed in any::<u64>()) {
        let s = scores(seed, n);
        let m = MaskPolicy::per_layer(k as f64).select(&[&s[..]], &[false]).unwrap();
        prop_assert_eq!(count(&m[0]), expected_keep(k, n));
        let kept = s.iter().zip(&m[0]).filter(|(_, &b)| b).map(|(x, _)| x.abs()).fold(f64::INFINITY, f64::min);
        let dropped = s.iter().zip(&m[0]).filter(|(_, &b)| !b).map(|(x, _)| x.abs()).fold(0.0, f64::max);
        prop_assert!(kept >= dropped);
    }

    #[test]
    fn global_keeps_exactly_round_k_total(
        k in 1u32..=100,
        sizes in prop::collection::vec(1usize..=300, 1..5),
        seed in any::<u64>(),
    ) {
        let layers: Vec<Vec<f64>> = sizes.iter().enumerate().map(|(i, &n)| scores(rng::mix(seed, i as u64), n)).collect();
        let views: Vec<&[f64]> = layers.iter().map(|l| &l[..]).collect();
        let frozen = vec![false; layers.len()];
        let total: usize = sizes.iter().sum();
        let want = (k as f64 / 100.0 * total as f64).round() as usize;
        for mode in [MaskMode::EdgePopup, MaskMode::RandomBaseline] {
            let mut p = MaskPolicy::global(k as f64);
            p.mode = mode;
            let m = p.select(&views, &frozen).unwrap();
            prop_assert_eq!(m.iter().map(|l| count(l)).sum::<usize>(), want);
        }
    }

    #[test]
    fn masks_ignore_positive_score_scaling(k in 1u32..=100, n in 1usize..=500, c in 1e-3f64..1e3, seed in any::<u64>()) {
        let s = scores(seed, n);
        let scaled: Vec<f64> = s.iter().map(|x| x * c).collect();
        let p = MaskPolicy::per_layer(k as f64);
        prop_assert_eq!(p.select(&[&s[..]], &[false]).unwrap(), p.select(&[&scaled[..]], &[false]).unwrap());
        let g = MaskPolicy::global(k as f64);
        prop_assert_eq!(g.select(&[&s[..], &s[..]], &[false, false]).unwrap(), g.select(&[&scaled[..], &scaled[..]], &[false, false]).unwrap());
    }

    #[test]
    fn random_baseline_ignores_scores(k in 1u32..=100, n in 1usize..=500, a in any::<u64>(), b in any::<u64>(), seed in any::<u64>()) {
        let mut p = MaskPolicy::per_layer(k as f64);
        p.mode = MaskMode::RandomBaseline;
        p.seed = seed;
        let (sa, sb) = (scores(a, n), scores(b, n));
        let ma = p.select(&[&sa[..]], &[false]).unwrap();
        prop_assert_eq!(count(&ma[0]), expected_keep(k, n));
        prop_assert_eq!(ma, p.select(&[&sb[..]], &[false]).unwrap());
    }

    #[test]
    fn frozen_layers_are_dense_and_excluded(k in 1u32..=99, n in 2usize..=300, seed in any::<u64>()) {
        let (a, b) = (scores(seed, n), scores(seed ^ 1, n));
        let m = MaskPolicy::global(k as f64).select(&[&a[..], &b[..]], &[true, false]).unwrap();
        prop_assert_eq!(count(&m[0]), n);
        prop_assert_eq!(count(&m[1]), (k as f64 / 100.0 * n as f64).round() as usize);
    }
}

#[test]
fn keep_counts_exhaustive() {
    for n in 1..=1000usize {
        let s = scores(n as u64, n);
        for k in 1..=100u32 {
            let m = MaskPolicy::per_layer(k as f64).select(&[&s[..]], &[false]).unwrap();
            assert_eq!(count(&m[0]), expected_keep(k, n), "k={k} n={n}");
        }
    }
}

#[test]
fn two_layer_global_example() {
    let a = [0.9f64, -0.1];
    let b = [0.3f64, -0.8, 0.05];
    let m = MaskPolicy::global(40.0).select(&[&a[..], &b[..]], &[false, false]).unwrap();
    assert_eq!(m, vec![vec![true, false], vec![false, true, false]]);
}

#[test]
fn initial_scores_are_reproducible_and_seed_dependent() {
    let a: Tensor<f64> = init_scores(&[8, 16], 16, 3);
    assert_eq!(a, init_scores(&[8, 16], 16, 3));
    assert_ne!(a, init_scores(&[8, 16], 16, 4));
}

fn small_generator(seed: u64) -> Generator<f64> {
    let mut spec = GeneratorSpec::point_mlp(4, 0.25, seed);
    spec.hidden = vec![32, 32];
    Generator::build(&spec, InitScheme::KaimingNormal).unwrap()
}

fn random_masks(g: &Generator<f64>, seed: u64) -> Vec<Tensor<f64>> {
    g.slots()
        .iter()
        .enumerate()
        .map(|(i, s)| rng::standard_normal::<f64>(&mut rng::seeded(seed, i as u64), &s.shape).map(|x| if x > 0.0 { 1.0 } else { 0.0 }))
        .collect()
}

fn set_all(g: &mut Generator<f64>, masks: &[Tensor<f64>], weights: Option<&[Tensor<f64>]>) {
    for (i, slot) in g.slots().to_vec().iter().enumerate() {
        g.graph_mut().set_param(slot.mask, masks[i].clone()).unwrap();
        if let Some(w) = weights {
            g.graph_mut().set_param(slot.weight, w[i].clone()).unwrap();
        }
    }
}

#[test]
fn masked_forward_equals_zeroed_weights() {
    for seed in 0..5 {
        let mut masked = small_generator(seed);
        let masks = random_masks(&masked, seed + 100);
        let zeroed: Vec<Tensor<f64>> = masked
            .weights()
            .zip(&masks)
            .map(|(w, m)| Tensor::new(w.shape(), w.data().iter().zip(m.data()).map(|(a, b)| a * b).collect()).unwrap())
            .collect();
        let ones: Vec<Tensor<f64>> = masks.iter().map(|m| Tensor::ones(m.shape())).collect();
        let mut plain = masked.clone();
        set_all(&mut masked, &masks, None);
        set_all(&mut plain, &ones, Some(&zeroed));
        let z = rng::standard_normal(&mut rng::seeded(seed, 9), &[16, 4]);
        assert_eq!(masked.sample(&z).unwrap(), plain.sample(&z).unwrap());
    }
}

#[test]
fn all_ones_mask_is_the_dense_network() {
    let mut g = small_generator(3);
    let z = rng::standard_normal(&mut rng::seeded(3, 9), &[16, 4]);
    let before = g.sample(&z).unwrap();
    let ones: Vec<Tensor<f64>> = g.slots().iter().map(|s| Tensor::ones(&s.shape)).collect();
    set_all(&mut g, &ones, None);
    assert_eq!(g.sample(&z).unwrap(), before);
}

fn ring_batch(seed: u64, n: usize) -> Tensor<f64> {
    let z = rng::standard_normal::<f64>(&mut rng::seeded(seed, 0), &[n, 3]);
    let data = (0..n)
        .flat_map(|i| {
            let r = z.row(i);
            let a = (r[2] * 4.0).floor() * std::f64::consts::FRAC_PI_2;
            [a.cos() + 0.05 * r[0], a.sin() + 0.05 * r[1]]
        })
        .collect();
    Tensor::new(&[n, 2], data).unwrap()
}

fn config(k: f64, steps: u64) -> SessionConfig {
    let mut c = SessionConfig::new(MaskPolicy::per_layer(k), steps);
    c.adam = AdamConfig { base_lr: 0.01, ..AdamConfig::default() };
    c.score_seed = 11;
    c
}

fn extractor() -> FeatureExtractor<f64> {
    FeatureExtractor::build(&FeatureExtractorSpec::point_default(2, 5)).unwrap()
}

fn run(session: &mut Session<f64>, steps: u64) -> Vec<f64> {
    (0..steps)
        .map(|t| {
            let real = ring_batch(1000 + t, 32);
            let z = rng::standard_normal(&mut rng::seeded(2000 + t, 0), &[32, 4]);
            session.step(&real, &z).unwrap().loss
        })
        .collect()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let make = || Session::search(small_generator(1), extractor(), config(30.0, 20)).unwrap();
    let (mut a, mut b) = (make(), make());
    assert_eq!(run(&mut a, 20), run(&mut b, 20));
    assert_eq!(a.scores_fingerprint(), b.scores_fingerprint());
    assert_eq!(a.masks_fingerprint(), b.masks_fingerprint());
}

#[test]
fn search_never_touches_weights() {
    let mut s = Session::search(small_generator(2), extractor(), config(30.0, 30)).unwrap();
    let (w, sc) = (s.weights_fingerprint(), s.scores_fingerprint());
    run(&mut s, 30);
    assert_eq!(s.weights_fingerprint(), w);
    assert_ne!(s.scores_fingerprint(), sc);
}

#[test]
fn finetune_changes_only_surviving_weights() {
    let g = small_generator(4);
    let masks = random_masks(&g, 7);
    let before: Vec<Tensor<f64>> = g.weights().cloned().collect();
    let mut s = Session::finetune(g, extractor(), masks.clone(), config(30.0, 30)).unwrap();
    let (m, sc) = (s.masks_fingerprint(), s.scores_fingerprint());
    run(&mut s, 30);
    assert_eq!(s.masks_fingerprint(), m);
    assert_eq!(s.scores_fingerprint(), sc);
    let mut moved = 0;
    for ((w0, w1), mask) in before.iter().zip(s.generator().weights()).zip(&masks) {
        for ((a, b), m) in w0.data().iter().zip(w1.data()).zip(mask.data()) {
            if *m == 0.0 {
                assert_eq!(a, b);
            } else if a != b {
                moved += 1;
            }
        }
    }
    assert!(moved > 0);
}

#[test]
fn toy_search_lowers_mmd_to_two_points() {
    let real = Tensor::from_rows(&[vec![-1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let target = Tensor::concat_rows(&vec![real.clone(); 32]).unwrap();
    let kernel = KernelSpec::rbf(1.0);
    let mut c = config(30.0, 200);
    c.loss = LossKind::KernelMmd;
    c.kernel = Some(kernel.clone());
    let raw = FeatureExtractor::build(&FeatureExtractorSpec::identity(&[2])).unwrap();
    let mut s = Session::search(small_generator(5), raw, c).unwrap();
    let z_eval = rng::standard_normal(&mut rng::seeded(77, 0), &[256, 4]);
    let mmd = |s: &mut Session<f64>| mmd2_kernel(&target, &s.sample(&z_eval, 256).unwrap(), &kernel).unwrap();
    let start = mmd(&mut s);
    for t in 0..200 {
        let z = rng::standard_normal(&mut rng::seeded(3000 + t, 0), &[64, 4]);
        s.step(&target, &z).unwrap();
    }
    s.refresh_masks().unwrap();
    let end = mmd(&mut s);
    assert!(end < 0.5 * start, "mmd2 {start} -> {end}");
}
