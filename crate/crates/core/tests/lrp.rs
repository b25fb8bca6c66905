mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oxipipe_core::cnn::LayerSpec;
use oxipipe_core::explain;

fn min_abs_preactivation(model: &oxipipe_core::cnn::CnnModel, input: &[f64]) -> f64 {
    let (_, trace) = model.forward(input).unwrap();
    model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.spec, LayerSpec::Conv1d { .. } | LayerSpec::Dense { .. }))
        .flat_map(|(i, _)| trace.acts[i + 1].data.iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn exact_conservation_at_zero_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut checked = 0;
    while checked < 100 {
        let (model, input) = common::random_model(&mut rng);
        if min_abs_preactivation(&model, &input) == 0.0 {
            continue;
        }
        checked += 1;
        let map = explain::lrp(&model, &input, 0.0).unwrap();
        let gap = map.conservation_error().abs();
        assert!(gap <= 1e-10 * map.prediction.abs().max(1.0), "gap {gap:e}");
    }
}

#[test]
fn single_unit_gap_is_eps_over_prediction() {
    // One dense unit: the eps-rule keeps z / (z + eps sign z) of R = z, so
    // the gap is |z| eps / (|z| + eps) whatever the weights. Near-zero
    // outputs therefore have a relative gap of about eps / |y|.
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for _ in 0..200 {
        let n = rng.random_range(1..6);
        let mut model = oxipipe_core::cnn::CnnModel::new(
            (1, n),
            vec![LayerSpec::Flatten, LayerSpec::Dense { in_dim: n, out_dim: 1 }],
            rng.random(),
        )
        .unwrap();
        model.layers[1].bias[0] = rng.random_range(-0.1..0.1);
        let input: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps = 1e-9;
        let map = explain::lrp(&model, &input, eps).unwrap();
        let y = map.prediction;
        if y == 0.0 {
            continue;
        }
        let expected = y.abs() * eps / (y.abs() + eps);
        let gap = map.conservation_error().abs();
        assert!((gap - expected).abs() <= 1e-15 + 1e-9 * expected, "y {y:e}: gap {gap:e} vs {expected:e}");
    }
}

#[test]
fn deviation_grows_with_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for _ in 0..50 {
        let (model, input) = common::random_model(&mut rng);
        if min_abs_preactivation(&model, &input) < 1e-3 {
            continue;
        }
        let mut last = -1.0;
        for eps in [1e-9, 1e-6, 1e-3, 1e-1] {
            let dev = explain::lrp(&model, &input, eps).unwrap().conservation_error().abs();
            assert!(dev + 1e-12 >= last, "eps {eps}: {dev:e} < {last:e}");
            last = dev;
        }
    }
}

#[test]
fn relevance_report_shares_are_normalised() {
    use oxipipe_core::harness::SyntheticPair;
    let (tr, _) = SyntheticPair::default().generate(3).unwrap();
    let ds = oxipipe_core::dsp::make_windows(&tr, 10.0, 5.0, &Default::default()).unwrap();
    let arch = oxipipe_core::cnn::Architecture::uniform(1, 4, 9);
    let model = oxipipe_core::cnn::CnnModel::from_architecture(&arch, (9, ds.window_len), 3).unwrap();
    let r = explain::channel_relevance_report(&model, &ds, 1e-9).unwrap();
    assert!(r.shares.iter().all(|s| (0.0..=1.0).contains(s)));
    assert!((r.shares.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    let w = explain::channel_weight_profile(&model).unwrap();
    assert!(w.scores.iter().all(|&s| s >= 0.0));
    assert!((w.shares.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_input_without_biases_has_zero_relevance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut model, input) = common::random_model(&mut rng);
        for l in &mut model.layers {
            l.bias.fill(0.0);
        }
        let map = explain::lrp(&model, &vec![0.0; input.len()], 1e-9).unwrap();
        prop_assert!(map.relevance.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn zero_samples_get_zero_relevance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, mut input) = common::random_model(&mut rng);
        let k = rng.random_range(0..input.len());
        input[k] = 0.0;
        let map = explain::lrp(&model, &input, 1e-9).unwrap();
        prop_assert_eq!(map.relevance[k], 0.0);
    }

    #[test]
    fn bias_relevance_within_bound(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, input) = common::random_model(&mut rng);
        let map = explain::lrp(&model, &input, 1e-9).unwrap();
        prop_assert!(map.bias_relevance.abs() <= map.bias_bound * (1.0 + 1e-12));
    }
}
