//! Property tests for stylization statistics, score normalisation, ranking
//! and checkpoint round trips.

mod common;

use bae::attribute::{log_normalized_score, normalize_score, AttributeMode, NormalizationSpec, Scorer};
use bae::harness::enhance::{delta_a, rank_order, run_baseline_b, topn_mean_delta, Ranked};
use bae::nets::{Codec, StyleVector};
use bae::styletx::{adain_tensor, StyleSource};
use bae::tensor::{Checkpoint, Graph, Tensor, EPS_STAT};
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn feature_map(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = Tensor::uniform(&[c, 1, 1], 0.2, 3.0, &mut rng);
    let shift = Tensor::uniform(&[c, 1, 1], -2.0, 2.0, &mut rng);
    let mut x = Tensor::randn(&[c, h, w], &mut rng);
    let hw = h * w;
    for (k, chunk) in x.data_mut().chunks_mut(hw).enumerate() {
        chunk.iter_mut().for_each(|v| *v = *v * scale.data()[k] + shift.data()[k]);
    }
    x
}

fn own_style(x: &Tensor) -> StyleVector {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let (mu, sigma) = g.channel_stats(v).unwrap();
    StyleVector::new(g.value(mu).clone(), g.value(sigma).clone()).unwrap()
}

fn ranked(internal: &[f64], delta: &[f64]) -> Vec<Ranked> {
    rank_order(internal)
        .into_iter()
        .enumerate()
        .map(|(rank, i)| Ranked {
            rank,
            sample: i,
            internal: internal[i],
            external: delta[i],
            delta: delta[i],
            alpha: 1.0,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adain_output_has_the_target_statistics(
        c in 1usize..5, h in 4usize..9, w in 4usize..9, seed in any::<u64>(),
        mu in prop::collection::vec(-3.0f64..3.0, 4),
        sigma in prop::collection::vec(0.1f64..3.0, 4),
    ) {
        let x = feature_map(c, h, w, seed);
        let style = StyleVector::new(Tensor::vector(&mu[..c]), Tensor::vector(&sigma[..c])).unwrap();
        let y = adain_tensor(&x, &style).unwrap();
        for (k, (m, s)) in channel_moments(&y).into_iter().enumerate() {
            prop_assert!((m - mu[k]).abs() < 1e-4);
            prop_assert!(((s * s + EPS_STAT).sqrt() - sigma[k]).abs() < 1e-4);
        }
    }

    #[test]
    fn adain_with_own_statistics_is_the_identity(c in 1usize..5, h in 2usize..9, w in 2usize..9, seed in any::<u64>()) {
        let x = feature_map(c, h, w, seed);
        let y = adain_tensor(&x, &own_style(&x)).unwrap();
        prop_assert!(y.bit_eq(&x));
    }

    #[test]
    fn adain_is_idempotent(c in 1usize..5, h in 4usize..9, w in 4usize..9, seed in any::<u64>(),
                           mu in -2.0f64..2.0, sigma in 0.5f64..2.0) {
        let x = feature_map(c, h, w, seed);
        let style = StyleVector::new(Tensor::full(&[c], mu), Tensor::full(&[c], sigma)).unwrap();
        let once = adain_tensor(&x, &style).unwrap();
        let twice = adain_tensor(&once, &style).unwrap();
        prop_assert!(twice.max_abs_diff(&once) < 1e-4);
    }

    #[test]
    fn normalisation_is_monotone_and_bounded(a in -20.0f64..20.0, b in -20.0f64..20.0, lambda in 0.01f64..1000.0) {
        prop_assume!(a != b);
        let (hi, lo) = if a > b { (a, b) } else { (b, a) };
        let spec = NormalizationSpec::sigmoid_power(lambda);
        prop_assert!(log_normalized_score(hi, &spec).unwrap() > log_normalized_score(lo, &spec).unwrap());
        let (nh, nl) = (normalize_score(hi, &spec).unwrap(), normalize_score(lo, &spec).unwrap());
        prop_assert!(nh >= nl);
        prop_assert!((0.0..=1.0).contains(&nh) && (0.0..=1.0).contains(&nl));

        let (ph, pl) = (1.0 / (1.0 + (-hi).exp()), 1.0 / (1.0 + (-lo).exp()));
        let spec = NormalizationSpec::power(lambda);
        prop_assert!(log_normalized_score(ph, &spec).unwrap() >= log_normalized_score(pl, &spec).unwrap());
        prop_assert!((0.0..=1.0).contains(&normalize_score(ph, &spec).unwrap()));
    }

    #[test]
    fn argmax_does_not_depend_on_lambda(raw in prop::collection::vec(-20.0f64..20.0, 1..40)) {
        let best = |lambda: f64| {
            let spec = NormalizationSpec::sigmoid_power(lambda);
            let s: Vec<f64> = raw.iter().map(|&r| log_normalized_score(r, &spec).unwrap()).collect();
            rank_order(&s)[0]
        };
        let reference = rank_order(&raw)[0];
        for lambda in [1.0, 10.0, 100.0, 1000.0] {
            prop_assert_eq!(best(lambda), reference);
        }
    }

    #[test]
    fn topn_is_sort_then_average(
        pairs in prop::collection::vec((-5.0f64..5.0, -1.0f64..1.0), 1..30),
        n in 1usize..30,
    ) {
        let n = n.min(pairs.len());
        let internal: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let delta: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let got = topn_mean_delta(&ranked(&internal, &delta), n).unwrap();

        let mut sorted: Vec<(usize, f64, f64)> = pairs.iter().enumerate().map(|(i, p)| (i, p.0, p.1)).collect();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expect = sorted[..n].iter().map(|t| t.2).sum::<f64>() / n as f64;
        prop_assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn rank_order_is_a_descending_permutation(scores in prop::collection::vec(-1e3f64..1e3, 0..50)) {
        let order = rank_order(&scores);
        let mut seen = order.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
        for w in order.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
    }
}

#[test]
fn topn_rejects_out_of_range_n() {
    let r = ranked(&[1.0, 2.0], &[0.1, 0.2]);
    assert!(topn_mean_delta(&r, 0).is_err());
    assert!(topn_mean_delta(&r, 3).is_err());
}

#[test]
fn baseline_top1_is_the_brute_force_maximum() {
    let m = RandomModels::new(2, AttributeMode::Regression);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let content = m.stylizer.content(&uniform(&[3, 16, 16], 0.0, 1.0, &mut rng)).unwrap();
    let styles: Vec<StyleVector> = (0..12)
        .map(|_| bae::nets::encode_style(&uniform(&[3, 16, 16], 0.0, 1.0, &mut rng), &m.stylizer.codec().encoder).unwrap())
        .collect();
    for alpha in [0.0, 0.5] {
        let r = run_baseline_b(&content, &styles, &m.stylizer, &m.internal, alpha, 3).unwrap();
        let brute: Vec<f64> = styles
            .iter()
            .map(|s| {
                let img = m.stylizer.stylize_alpha(&content, StyleSource::Vector(s), alpha).unwrap();
                m.internal.score(&img).unwrap()
            })
            .collect();
        let (best, max) = brute
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!(r.total, styles.len());
        assert_eq!(r.top.len(), 3);
        assert_eq!(r.top[0].sample, best);
        assert!((r.top[0].internal - max).abs() < 1e-12);
        assert!(r.top.windows(2).all(|w| w[0].internal >= w[1].internal));
    }
}

#[test]
fn delta_is_external_difference() {
    let m = RandomModels::new(5, AttributeMode::Binary);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
    let b = uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
    assert_eq!(delta_a(&a, &a, &m.external).unwrap(), 0.0);
    let d = delta_a(&a, &b, &m.external).unwrap();
    assert_eq!(d, -delta_a(&b, &a, &m.external).unwrap());
    assert_eq!(d, m.external.score(&b).unwrap() - m.external.score(&a).unwrap());
}

#[test]
fn reloaded_networks_compute_bit_identical_outputs() {
    let m = RandomModels::new(9, AttributeMode::Regression);
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);

    let path = dir.path().join("codec.ckpt");
    m.stylizer.codec().to_checkpoint().save(&path).unwrap();
    let codec = Codec::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert!(codec.reconstruct(&img).unwrap().bit_eq(&m.stylizer.codec().reconstruct(&img).unwrap()));

    let path = dir.path().join("predictor.ckpt");
    bae::nets::save_checkpoint(m.internal.net(), &path).unwrap();
    let net: bae::nets::PredictorNet = bae::nets::load_checkpoint(&path).unwrap();
    let reloaded = bae::attribute::Predictor::new(net, AttributeMode::Regression);
    assert_eq!(reloaded.score(&img).unwrap().to_bits(), m.internal.score(&img).unwrap().to_bits());

    let path = dir.path().join("generator.ckpt");
    bae::nets::save_checkpoint(&m.generator, &path).unwrap();
    let gen: bae::nets::StyleGenerator = bae::nets::load_checkpoint(&path).unwrap();
    let z = Tensor::randn(&[gen.z_dim()], &mut rng);
    assert_eq!(gen.generate(&z).unwrap(), m.generator.generate(&z).unwrap());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let m = RandomModels::new(1, AttributeMode::Regression);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codec.ckpt");
    m.stylizer.codec().to_checkpoint().save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(bae::Error::Checkpoint(_))));
}
