use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::Rng;

use detcal::data::{Example, FeatureMode, LabeledDataset};
use detcal::nn::{
    self, bce_loss, grad_check, grad_check_with_noise, kl_gaussian, BayesianDenseLayer, DenseLayer,
    DropoutPlacement, DropoutSpec, Layer, LayerKind, Mode, ModelParams, TrainConfig,
};
use detcal::rng::rng_from_seed;

fn input(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn dense_single_layer_gradient() {
    let mut rng = rng_from_seed(1);
    let model = ModelParams {
        layers: vec![Layer::Dense(DenseLayer {
            inputs: 4,
            outputs: 1,
            weights: vec![0.3, -0.7, 0.2, 0.5],
            bias: vec![0.1],
        })],
        dropout: None,
        seed: 0,
    };
    for y in [0, 1] {
        let x = input(&mut rng, 4);
        let err = grad_check(&model, &x, y, 1e-5, &mut rng).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}

#[test]
fn dense_mlp_gradient() {
    let mut rng = rng_from_seed(2);
    let model = ModelParams::mlp(6, &[5, 4], LayerKind::Dense, None, 3).unwrap();
    for _ in 0..5 {
        let x = input(&mut rng, 6);
        let err = grad_check(&model, &x, rng.random_range(0..2), 1e-5, &mut rng).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn dropout_in_eval_mode_matches_plain_model() {
    let plain = ModelParams::mlp(6, &[5], LayerKind::Dense, None, 4).unwrap();
    let spec = DropoutSpec::new(0.4, DropoutPlacement::BeforeEveryLayer, false).unwrap();
    let dropped = ModelParams {
        dropout: Some(spec),
        ..plain.clone()
    };
    let x = input(&mut rng_from_seed(5), 6);
    let a = grad_check(&plain, &x, 1, 1e-5, &mut rng_from_seed(6)).unwrap();
    let b = grad_check(&dropped, &x, 1, 1e-5, &mut rng_from_seed(6)).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    let pa = plain.forward(&x, Mode::Eval, &mut rng_from_seed(7)).unwrap();
    let pb = dropped.forward(&x, Mode::Eval, &mut rng_from_seed(7)).unwrap();
    assert_eq!(pa.to_bits(), pb.to_bits());
}

#[test]
fn dropout_gradient_through_frozen_masks() {
    let spec = DropoutSpec::new(0.4, DropoutPlacement::BeforeEveryLayer, false).unwrap();
    let mut model = ModelParams::mlp(8, &[6, 4], LayerKind::Dense, Some(spec), 8).unwrap();
    let mut rng = rng_from_seed(9);
    // Zero biases put fully masked units exactly on the ReLU kink.
    for l in &mut model.layers {
        if let Layer::Dense(d) = l {
            d.bias.iter_mut().for_each(|b| *b = rng.random_range(0.05..0.3));
        }
    }
    for _ in 0..5 {
        let x = input(&mut rng, 8);
        let noise = model.sample_noise(Mode::Train, &mut rng);
        assert!(noise.masks.iter().any(Option::is_some));
        let err = grad_check_with_noise(&model, &x, 1, 1e-5, &noise).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn bayesian_gradient_with_frozen_noise() {
    let mut model = ModelParams::mlp(5, &[4], LayerKind::Bayesian, None, 10).unwrap();
    // Widen the posteriors so the spread gradients are not vanishingly small.
    let mut rng = rng_from_seed(11);
    for l in &mut model.layers {
        if let Layer::Bayesian(b) = l {
            b.spread_raw.iter_mut().for_each(|s| *s = rng.random_range(-2.0..0.5));
        }
    }
    for _ in 0..5 {
        let x = input(&mut rng, 5);
        let noise = model.sample_noise(Mode::Train, &mut rng);
        assert!(noise.eps.iter().any(Option::is_some));
        let err = grad_check_with_noise(&model, &x, rng.random_range(0..2), 1e-5, &noise).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}

/// Ridge-stabilised IRLS logistic regression with intercept.
fn logistic_oracle(xs: &[[f64; 2]], ys: &[u8]) -> [f64; 3] {
    let mut w = [0.0; 3];
    let lambda = 1e-3;
    for _ in 0..100 {
        let mut h = [[0.0; 3]; 3];
        let mut g = [0.0; 3];
        for (x, &y) in xs.iter().zip(ys) {
            let f = [1.0, x[0], x[1]];
            let z: f64 = (0..3).map(|k| w[k] * f[k]).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            let s = p * (1.0 - p);
            for a in 0..3 {
                g[a] += (p - f64::from(y)) * f[a];
                for b in 0..3 {
                    h[a][b] += s * f[a] * f[b];
                }
            }
        }
        for a in 0..3 {
            g[a] += lambda * w[a];
            h[a][a] += lambda;
        }
        let step = solve3(h, g);
        (0..3).for_each(|k| w[k] -= step[k]);
    }
    w
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..3 {
            let f = a[r][c] / a[c][c];
            let pivot = a[c];
            for (v, p) in a[r][c..].iter_mut().zip(&pivot[c..]) {
                *v -= f * p;
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        x[r] = (b[r] - (r + 1..3).map(|k| a[r][k] * x[k]).sum::<f64>()) / a[r][r];
    }
    x
}

fn separable(n: usize, seed: u64) -> (LabeledDataset, Vec<[f64; 2]>) {
    let mut rng = rng_from_seed(seed);
    let mut ds = LabeledDataset::new(2, FeatureMode::DenseReal);
    let mut xs = Vec::new();
    while ds.len() < n {
        let x: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let s = 1.5 * x[0] - x[1] + 0.2;
        if s.abs() < 0.1 {
            continue;
        }
        ds.examples.push(Example {
            id: format!("p{}", ds.len()),
            features: x.to_vec(),
            label: Some(u8::from(s > 0.0)),
            month: None,
        });
        xs.push(x);
    }
    (ds, xs)
}

#[test]
fn training_fits_separable_data() {
    let (train, xs) = separable(400, 21);
    let (val, _) = separable(100, 22);
    let ys = train.labels().unwrap();
    let w = logistic_oracle(&xs, &ys);
    let oracle_acc = xs
        .iter()
        .zip(&ys)
        .filter(|(x, &y)| u8::from(w[0] + w[1] * x[0] + w[2] * x[1] >= 0.0) == y)
        .count() as f64
        / ys.len() as f64;
    assert_eq!(oracle_acc, 1.0, "the data must be linearly separable");

    let init = ModelParams::mlp(2, &[16], LayerKind::Dense, None, 23).unwrap();
    let cfg = TrainConfig {
        seed: 24,
        ..TrainConfig::default()
    };
    let model = nn::train(&init, &train, &val, &cfg).unwrap();
    let mut rng = rng_from_seed(0);
    let correct = train
        .examples
        .iter()
        .filter(|e| {
            let p = model.forward(&e.features, Mode::Eval, &mut rng).unwrap();
            u8::from(p >= 0.5) == e.label.unwrap()
        })
        .count();
    let acc = correct as f64 / train.len() as f64;
    assert!(acc >= 0.99, "training accuracy {acc} below the separable oracle's {oracle_acc}");
}

#[test]
fn best_epoch_has_highest_validation_accuracy() {
    let (train, _) = separable(200, 31);
    let (val, _) = separable(60, 32);
    let init = ModelParams::mlp(2, &[8], LayerKind::Dense, None, 33).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        seed: 34,
        ..TrainConfig::default()
    };
    let h = nn::train_with_history(&init, &train, &val, &cfg).unwrap();
    let best = h.epochs.iter().map(|e| e.val_accuracy).fold(f64::MIN, f64::max);
    let first = h.epochs.iter().find(|e| e.val_accuracy == best).unwrap();
    assert_eq!(h.best_epoch, first.epoch);
}

#[test]
fn bayesian_training_is_deterministic() {
    let (train, _) = separable(120, 41);
    let (val, _) = separable(40, 42);
    let init = ModelParams::mlp(2, &[6], LayerKind::Bayesian, None, 43).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        seed: 44,
        ..TrainConfig::default()
    };
    let a = nn::train(&init, &train, &val, &cfg).unwrap();
    let b = nn::train(&init, &train, &val, &cfg).unwrap();
    let bits = |m: &ModelParams| m.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&init));
}

#[test]
fn kl_examples() {
    let one = |mean: f64, std: f64| BayesianDenseLayer {
        inputs: 1,
        outputs: 1,
        mean: vec![mean],
        // softplus^-1(std)
        spread_raw: vec![(std.exp() - 1.0).ln()],
        bias: vec![0.0],
        prior_std: 1.0,
    };
    assert_abs_diff_eq!(kl_gaussian(&one(0.0, 1.0)), 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(kl_gaussian(&one(1.0, 1.0)), 0.5, epsilon = 1e-12);
    // ln(1/0.8) + (0.64 + 0.25)/2 - 1/2
    assert_abs_diff_eq!(kl_gaussian(&one(0.5, 0.8)), 0.168_143_551_314_209_7, epsilon = 1e-12);
}

proptest! {
    #[test]
    fn bce_is_non_negative(p in 0.0f64..=1.0, y in 0u8..2) {
        prop_assert!(bce_loss(p, y) >= 0.0);
    }

    #[test]
    fn forward_is_a_probability(seed in any::<u64>(), xs in prop::collection::vec(-5.0f64..5.0, 3)) {
        let spec = DropoutSpec::new(0.3, DropoutPlacement::BeforeEveryLayer, true).unwrap();
        let m = ModelParams::mlp(3, &[4], LayerKind::Dense, Some(spec), seed).unwrap();
        let p = m.forward(&xs, Mode::Eval, &mut rng_from_seed(seed)).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn kl_is_non_negative(mean in -3.0f64..3.0, raw in -6.0f64..3.0, prior in 0.1f64..3.0) {
        let l = BayesianDenseLayer {
            inputs: 1,
            outputs: 1,
            mean: vec![mean],
            spread_raw: vec![raw],
            bias: vec![0.0],
            prior_std: prior,
        };
        prop_assert!(kl_gaussian(&l) >= -1e-15);
    }
}
