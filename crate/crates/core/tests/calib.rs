use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use detcal::calib::*;
use detcal::metrics::decisions;
use detcal::nn::{DropoutPlacement, DropoutSpec, LayerKind, Mode, ModelParams};
use detcal::rng::{rng_from_seed, substream};
use detcal::shift::{gen_dataset, GeneratorConfig, SynthSpec};
use detcal::{LabeledDataset, TrainConfig};

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn nll_at(logits: &[f64], labels: &[u8], t: f64) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| {
            let p = sigmoid(l / t).clamp(1e-12, 1.0 - 1e-12);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / logits.len() as f64
}

/// Logits whose sigmoid is the true conditional probability of the label.
fn calibrated_logits(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = rng_from_seed(seed);
    let logits: Vec<f64> = (0..n).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let labels = logits
        .iter()
        .map(|&l| u8::from(rng.random::<f64>() < sigmoid(l)))
        .collect();
    (logits, labels)
}

/// Minimiser of validation NLL over a log-spaced grid on [1e-2, 1e2].
fn grid_temperature(logits: &[f64], labels: &[u8]) -> f64 {
    (0..=4000)
        .map(|k| 10f64.powf(-2.0 + 4.0 * k as f64 / 4000.0))
        .min_by(|&a, &b| nll_at(logits, labels, a).total_cmp(&nll_at(logits, labels, b)))
        .unwrap()
}

#[test]
fn apply_temperature_example() {
    assert_abs_diff_eq!(apply_temperature(2.0, 2.0), sigmoid(1.0), epsilon = 1e-15);
    assert_abs_diff_eq!(apply_temperature(2.0, 2.0), 0.731059, epsilon = 1e-6);
}

#[test]
fn temperature_of_calibrated_logits_is_near_one() {
    let (l, y) = calibrated_logits(5000, 1);
    let t = fit_temperature(&l, &y).unwrap();
    let grid = grid_temperature(&l, &y);
    assert!((0.8..=1.25).contains(&t), "T* = {t}");
    assert!((t / grid - 1.0).abs() < 0.01, "fit {t} vs grid {grid}");
}

#[test]
fn temperature_recovers_logit_scale() {
    let (l, y) = calibrated_logits(5000, 2);
    let scaled: Vec<f64> = l.iter().map(|v| 3.0 * v).collect();
    let t = fit_temperature(&scaled, &y).unwrap();
    let grid = grid_temperature(&scaled, &y);
    assert!((grid / 3.0 - 1.0).abs() < 0.1, "grid oracle {grid}");
    assert!((t / 3.0 - 1.0).abs() < 0.1, "T* = {t}");
    assert!((t / grid - 1.0).abs() < 0.01);
}

#[test]
fn temperature_never_worse_than_identity() {
    for seed in 0..10 {
        let (l, y) = calibrated_logits(300, 100 + seed);
        let t = fit_temperature(&l, &y).unwrap();
        assert!(nll_at(&l, &y, t) <= nll_at(&l, &y, 1.0) + 1e-15);
    }
}

#[test]
fn weight_fitting_matches_simplex_grid() {
    // Member 0 is accurate on separable labels, member 1 always says 0.5.
    let mut rng = rng_from_seed(3);
    let labels: Vec<u8> = (0..400).map(|_| rng.random_range(0..2)).collect();
    let good: Vec<f64> = labels
        .iter()
        .map(|&y| if y == 1 { rng.random_range(0.8..0.99) } else { rng.random_range(0.01..0.2) })
        .collect();
    let flat = vec![0.5; labels.len()];
    let probs = vec![good.clone(), flat.clone()];
    let w = fit_weights_from_probs(&probs, &labels).unwrap();
    assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-9);

    let obj = |a: f64| {
        let p: Vec<f64> = good.iter().zip(&flat).map(|(g, f)| a * g + (1.0 - a) * f).collect();
        let logits: Vec<f64> = p.iter().map(|p| (p / (1.0 - p)).ln()).collect();
        nll_at(&logits, &labels, 1.0)
    };
    let best = (0..=100)
        .map(|k| k as f64 / 100.0)
        .min_by(|&a, &b| obj(a).total_cmp(&obj(b)))
        .unwrap();
    assert!(w[0] > 0.9, "weights {w:?}");
    // Agreement to the grid resolution; the optimum may sit on a simplex
    // corner, which the softmax parameterisation only approaches.
    assert!((w[0] - best).abs() <= 0.01, "fit {} vs grid {best}", w[0]);
    assert!(obj(w[0]) <= obj(best) + 1e-3);
}

#[test]
fn identical_members_get_uniform_weights() {
    let p = vec![0.3, 0.8, 0.6, 0.1];
    let y = [0, 1, 1, 0];
    assert_eq!(fit_weights_from_probs(&[p.clone(), p], &y).unwrap(), vec![0.5, 0.5]);
    assert_eq!(fit_weights_from_probs(&[vec![0.4, 0.7]], &[0, 1]).unwrap(), vec![1.0]);
}

fn data(seed: u64) -> LabeledDataset {
    let gen = GeneratorConfig::synthesize(&SynthSpec {
        dimension: 48,
        informative: 10,
        label_noise: 0.05,
        ..SynthSpec::default()
    })
    .unwrap();
    gen_dataset(&gen, 300, seed).unwrap()
}

fn spec(kind: DetectorKind) -> DetectorSpec {
    DetectorSpec {
        kind,
        hidden: vec![12],
        ..DetectorSpec::default()
    }
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn detector_rosters() {
    let (train, val) = (data(1), data(2));
    let vanilla = train_detector(&spec(DetectorKind::Vanilla), &train, &val, &quick()).unwrap();
    assert_eq!(vanilla.members.len(), 1);
    assert!(vanilla.temperature.is_none() && vanilla.weights.is_none());

    let ts = train_detector(&spec(DetectorKind::TempScaling), &train, &val, &quick()).unwrap();
    assert!(ts.temperature.is_some());
    let bits = |m: &ModelParams| m.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ts.members[0]), bits(&vanilla.members[0]));

    // Argmax invariance on the test set for the fitted temperature.
    let test = data(3);
    let a = decisions(&vanilla.predict_dataset(&test, 0).unwrap().iter().map(PredictiveSample::mean).collect::<Vec<_>>());
    let b = decisions(&ts.predict_dataset(&test, 0).unwrap().iter().map(PredictiveSample::mean).collect::<Vec<_>>());
    assert_eq!(a, b);

    let ens = train_detector(&spec(DetectorKind::Ensemble), &train, &val, &quick()).unwrap();
    assert_eq!(ens.members.len(), 10);
    for i in 0..10 {
        for j in i + 1..10 {
            assert_ne!(bits(&ens.members[i]), bits(&ens.members[j]), "members {i} and {j}");
        }
    }

    let we = train_detector(&spec(DetectorKind::WEnsemble), &train, &val, &quick()).unwrap();
    let w = we.weights.as_ref().unwrap();
    assert_eq!(w.len(), 10);
    assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    // Same member seeds as the plain ensemble, so post-processing left them untouched.
    for (m, e) in we.members.iter().zip(&ens.members) {
        assert_eq!(bits(m), bits(e));
    }
}

#[test]
fn bundle_round_trip_preserves_predictions() {
    let (train, val) = (data(4), data(5));
    let det = train_detector(&spec(DetectorKind::WEnsemble), &train, &val, &TrainConfig { epochs: 1, ..quick() }).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_bundle(&det, tmp.path(), Some("abc")).unwrap();
    let back = load_bundle(tmp.path()).unwrap();
    assert_eq!(back, det);
    let test = data(6);
    assert_eq!(det.predict_dataset(&test, 1).unwrap(), back.predict_dataset(&test, 1).unwrap());
}

fn mc(model: ModelParams, t: usize) -> CalibratedDetector {
    CalibratedDetector {
        kind: DetectorKind::McDropout,
        members: vec![model],
        temperature: None,
        weights: None,
        samples_per_prediction: t,
    }
}

#[test]
fn mc_dropout_rate_zero_matches_vanilla() {
    let spec0 = DropoutSpec::new(0.0, DropoutPlacement::BeforeEveryLayer, true).unwrap();
    let m = ModelParams::mlp(6, &[5], LayerKind::Dense, Some(spec0), 1).unwrap();
    let x = [0.5, -0.2, 0.1, 0.9, -0.7, 0.3];
    let plain = ModelParams { dropout: None, ..m.clone() };
    let p = plain.forward(&x, Mode::Eval, &mut rng_from_seed(0)).unwrap();
    let s = mc(m, 10).predict(&x, &mut rng_from_seed(2)).unwrap();
    assert!(s.member_probs().iter().all(|&q| q == p));
}

#[test]
fn single_member_ensemble_is_its_member() {
    let m = ModelParams::mlp(4, &[3], LayerKind::Dense, None, 2).unwrap();
    let x = [0.1, 0.2, -0.3, 0.4];
    let p = m.forward(&x, Mode::Eval, &mut rng_from_seed(0)).unwrap();
    let det = CalibratedDetector {
        kind: DetectorKind::Ensemble,
        members: vec![m],
        temperature: None,
        weights: None,
        samples_per_prediction: 10,
    };
    let s = det.predict(&x, &mut rng_from_seed(0)).unwrap();
    assert_eq!(s.member_probs(), &[p]);
    assert_eq!(s.weights(), &[1.0]);
}

#[test]
fn mc_mean_is_arithmetic_average() {
    let spec4 = DropoutSpec::new(0.4, DropoutPlacement::BeforeEveryLayer, true).unwrap();
    let m = ModelParams::mlp(6, &[8], LayerKind::Dense, Some(spec4), 3).unwrap();
    let x = [0.5, -0.2, 0.1, 0.9, -0.7, 0.3];
    let s = mc(m, 10).predict(&x, &mut rng_from_seed(4)).unwrap();
    assert_eq!(s.len(), 10);
    let mut avg = 0.0;
    for p in s.member_probs() {
        avg += p;
    }
    avg /= 10.0;
    assert_eq!(s.mean(), avg);
}

#[test]
fn mc_variance_shrinks_as_one_over_t() {
    let spec4 = DropoutSpec::new(0.4, DropoutPlacement::BeforeEveryLayer, true).unwrap();
    let m = ModelParams::mlp(6, &[8, 8], LayerKind::Dense, Some(spec4), 5).unwrap();
    let x = [0.9, -0.8, 0.7, 1.2, -0.4, 0.6];
    let reruns = 2000;
    let var_of_mean = |t: usize| {
        let det = mc(m.clone(), t);
        let means: Vec<f64> = (0..reruns)
            .map(|r| det.predict(&x, &mut substream(77 + t as u64, r)).unwrap().mean())
            .collect();
        let mu = means.iter().sum::<f64>() / reruns as f64;
        means.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (reruns - 1) as f64
    };
    let v1 = var_of_mean(1);
    assert!(v1 > 0.0);
    for t in [4usize, 16] {
        let ratio = v1 / var_of_mean(t);
        let t = t as f64;
        assert!((0.75 * t..=1.33 * t).contains(&ratio), "var ratio at T={t}: {ratio}");
    }
}

proptest! {
    #[test]
    fn argmax_invariant_under_temperature(l in -50.0f64..50.0, t in 0.01f64..100.0) {
        prop_assert_eq!(apply_temperature(l, t) >= 0.5, apply_temperature(l, 1.0) >= 0.5);
    }

    #[test]
    fn uniform_mean_is_plain_average(p in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let s = PredictiveSample::uniform(p.clone()).unwrap();
        prop_assert_eq!(s.mean(), p.iter().sum::<f64>() / p.len() as f64);
    }

    #[test]
    fn fitted_weights_on_simplex(seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let labels: Vec<u8> = (0..30).map(|_| rng.random_range(0..2)).collect();
        let probs: Vec<Vec<f64>> = (0..3).map(|_| (0..30).map(|_| rng.random::<f64>()).collect()).collect();
        let w = fit_weights_from_probs(&probs, &labels).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
    }
}
