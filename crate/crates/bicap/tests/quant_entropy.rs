mod common;

use bicap::autodiff::Graph;
use bicap::entropy::{
    filter_stats, mean_entropy, penalized_loss, EntropyConfig, EntropyScope, WeightView,
};
use bicap::model::{build_model, Arch, ModelConfig};
use bicap::quant::{binarize, quantize_activation, tanh_surrogate, QuantConfig};
use bicap::tensor::Tensor;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn surrogate_tracks_binarization_above_magnitude_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let data: Vec<f64> = (0..10_000)
        .map(|_| {
            let mag = rng.gen_range(1e-4..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let t = Tensor::from_vec(&[10_000], data).unwrap();
    let b = binarize(&t).unwrap();
    let s = tanh_surrogate(&t, 5);
    let worst = max_abs_diff(b.data(), s.data());
    assert!(worst < 1e-8, "max |binarize - surrogate| = {worst:e}");
}

#[test]
fn surrogate_disagrees_with_binarization_at_tiny_magnitudes() {
    // tanh(1e5 * w) -> 0 as w -> 0 while sign(0+) = +1; the fidelity bound
    // needs the magnitude floor.
    let t = Tensor::from_vec(&[1], vec![1e-9]).unwrap();
    let b = binarize(&t).unwrap();
    let s = tanh_surrogate(&t, 5);
    assert!((b.data()[0] - s.data()[0]).abs() > 0.9);
}

#[test]
fn quantize_activation_is_idempotent_and_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for bits in [1u32, 2, 4, 8] {
        let mut vals: Vec<f64> = (0..2000).map(|_| rng.gen_range(-0.5..1.5)).collect();
        let t = Tensor::from_vec(&[vals.len()], vals.clone()).unwrap();
        let q = quantize_activation(&t, bits);
        let qq = quantize_activation(&q, bits);
        assert_eq!(q.data(), qq.data(), "idempotence at {bits} bits");

        // Monotone: quantize preserves the order of sorted inputs.
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let sorted = Tensor::from_vec(&[vals.len()], vals).unwrap();
        let qs = quantize_activation(&sorted, bits);
        assert!(qs.data().windows(2).all(|w| w[0] <= w[1]), "monotone at {bits} bits");

        // Codomain: at most 2^bits distinct values, all inside [0, 1].
        let mut distinct: Vec<u64> = qs.data().iter().map(|v| v.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert!(distinct.len() <= (1 << bits));
        assert!(qs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn entropy_scale_invariance_and_sign_flip() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..1000 {
        let n = rng.gen_range(2..40);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = filter_stats(&w).h;

        let c = rng.gen_range(0.01..100.0);
        let scaled: Vec<f64> = w.iter().map(|v| c * v).collect();
        assert!((filter_stats(&scaled).h - h).abs() < 1e-9, "scale invariance, c={c}");

        let flipped: Vec<f64> = w.iter().map(|v| -v).collect();
        let fs = filter_stats(&flipped);
        let os = filter_stats(&w);
        assert!((fs.h - h).abs() < 1e-12, "sign-flip symmetry");
        assert!((fs.p - os.n_prob).abs() < 1e-12);
    }
}

#[test]
fn entropy_extremes_characterized_by_delta() {
    // H = 1 iff delta = 0; H = 0 iff |delta| = S.
    let balanced = filter_stats(&[0.4, -0.4, 1.1, -1.1]);
    assert_eq!(balanced.delta.abs(), 0.0);
    assert_eq!(balanced.h, 1.0);

    let degenerate = filter_stats(&[0.4, 0.1, 0.7]);
    assert!((degenerate.delta - degenerate.s).abs() < 1e-15);
    assert_eq!(degenerate.h, 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..200 {
        let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let st = filter_stats(&w);
        if st.delta.abs() > 1e-9 {
            assert!(st.h < 1.0);
        }
        if (st.delta.abs() - st.s).abs() > 1e-9 {
            assert!(st.h > 0.0);
        }
    }
}

#[test]
fn binary_view_mean_entropy_matches_combinatorial_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let model = build_model(
        &ModelConfig {
            arch: Arch::LenetBinary,
            num_classes: 10,
            width_den: 1,
            in_channels: 3,
            binarize: true,
            quant: QuantConfig::default(),
        },
        rng.gen(),
    )
    .unwrap();

    // Oracle: per filter, the entropy of the empirical +1 frequency.
    let mut oracle_sum = 0.0;
    let mut count = 0usize;
    for (_, lw) in model.binary_conv_layers() {
        let f = lw.binary.shape()[0];
        let n = lw.binary.numel() / f;
        for fi in 0..f {
            let slice = &lw.binary.data()[fi * n..(fi + 1) * n];
            let pos = slice.iter().filter(|&&v| v == 1.0).count() as f64 / n as f64;
            let h = if pos == 0.0 || pos == 1.0 {
                0.0
            } else {
                -(pos * pos.log2() + (1.0 - pos) * (1.0 - pos).log2())
            };
            oracle_sum += h;
            count += 1;
        }
    }
    let oracle = oracle_sum / count as f64;
    let got = mean_entropy(&model, &EntropyConfig::default(), WeightView::Binary).unwrap();
    assert!((got - oracle).abs() < 1e-12, "{got} vs oracle {oracle}");
}

#[test]
fn model_mean_entropy_equals_per_filter_average() {
    let model = build_model(
        &ModelConfig {
            arch: Arch::LenetBinary,
            num_classes: 10,
            width_den: 1,
            in_channels: 3,
            binarize: true,
            quant: QuantConfig::default(),
        },
        77,
    )
    .unwrap();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (_, lw) in model.binary_conv_layers() {
        let f = lw.binary.shape()[0];
        let n = lw.binary.numel() / f;
        for fi in 0..f {
            sum += filter_stats(&lw.binary.data()[fi * n..(fi + 1) * n]).h;
            count += 1;
        }
    }
    let got = mean_entropy(&model, &EntropyConfig::default(), WeightView::Binary).unwrap();
    assert!((got - sum / count as f64).abs() < 1e-12);
}

#[test]
fn entropy_scope_can_restrict_layers() {
    let model = build_model(
        &ModelConfig {
            arch: Arch::LenetBinary,
            num_classes: 10,
            width_den: 1,
            in_channels: 3,
            binarize: true,
            quant: QuantConfig::default(),
        },
        5,
    )
    .unwrap();
    let only_block0 = EntropyConfig {
        scope: EntropyScope::Layers(vec!["block0.conv".to_string()]),
        ..Default::default()
    };
    let restricted = mean_entropy(&model, &only_block0, WeightView::Binary).unwrap();
    let all = mean_entropy(&model, &EntropyConfig::default(), WeightView::Binary).unwrap();
    assert_ne!(restricted, all);

    let empty = EntropyConfig { scope: EntropyScope::Layers(vec![]), ..Default::default() };
    assert!(mean_entropy(&model, &empty, WeightView::Binary).is_err());

    let full_model = build_model(
        &ModelConfig {
            arch: Arch::LenetBinary,
            num_classes: 10,
            width_den: 1,
            in_channels: 3,
            binarize: false,
            quant: QuantConfig::default(),
        },
        5,
    )
    .unwrap();
    assert!(mean_entropy(&full_model, &EntropyConfig::default(), WeightView::Binary).is_err());
}

#[test]
fn penalized_loss_with_zero_lambda_returns_task_loss_var() {
    let mut g = Graph::new();
    let w = g.param(Tensor::from_vec(&[2, 2], vec![0.5, -0.5, 0.3, -0.3]).unwrap());
    let s = g.sum(w).unwrap();
    let cfg = EntropyConfig { lambda: 0.0, ..Default::default() };
    let out = penalized_loss(&mut g, s, &[w], &cfg).unwrap();
    assert_eq!(out, s, "lambda = 0 must pass the task loss through untouched");
}

#[test]
fn balanced_filters_at_target_one_contribute_zero_penalty_and_gradient() {
    let mut g = Graph::new();
    // Each filter row is exactly balanced: surrogate entropy is exactly 1.
    let w = g.param(Tensor::from_vec(&[2, 4], vec![0.3, -0.3, 0.7, -0.7, 0.2, -0.2, 0.9, -0.9]).unwrap());
    let zero = g.leaf(Tensor::scalar(0.0));
    let task = g.sum(zero).unwrap();
    let cfg = EntropyConfig { target: 1.0, lambda: 1e-4, k: 1, scope: EntropyScope::AllBinaryConv };
    let loss = penalized_loss(&mut g, task, &[w], &cfg).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
    g.backward(loss).unwrap();
    let grad = g.grad(w).unwrap();
    assert!(grad.data().iter().all(|&v| v == 0.0), "balanced optimum must be a stationary point");
}

#[test]
fn penalty_gradient_matches_finite_differences_on_two_weight_filter() {
    // k = 0, H_e = 1: the spec's minimal differentiability example.
    let w = Tensor::from_vec(&[1, 2], vec![0.4, -0.1]).unwrap();
    assert_grads_match(&[w], 1e-6, |g, v| {
        let zero = g.leaf(Tensor::scalar(0.0));
        let task = g.sum(zero)?;
        let cfg = EntropyConfig { target: 1.0, lambda: 1e-4, k: 0, scope: EntropyScope::AllBinaryConv };
        penalized_loss(g, task, v, &cfg)
    });
}

#[test]
fn negative_lambda_is_rejected() {
    let mut g = Graph::new();
    let w = g.param(Tensor::from_vec(&[1, 2], vec![0.5, -0.5]).unwrap());
    let task = g.sum(w).unwrap();
    let cfg = EntropyConfig { lambda: -1.0, ..Default::default() };
    assert!(penalized_loss(&mut g, task, &[w], &cfg).is_err());
}
