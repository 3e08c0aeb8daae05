use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ModelParams, Mode};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub kl_weight: f64,
    /// Element-wise gradient clamp to `[-c, c]`.
    pub gradient_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            kl_weight: 1.0,
            gradient_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        if let Some(c) = self.gradient_clip {
            if !(c > 0.0) {
                return Err(Error::Config("gradient_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Largest absolute gradient component seen before clipping.
    pub max_raw_grad: f64,
    /// Largest absolute gradient component fed to the optimiser.
    pub max_applied_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub model: ModelParams,
    /// 1-based epoch of the selected checkpoint; 0 when no epoch ran.
    pub best_epoch: usize,
    pub epochs: Vec<EpochStats>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-7;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Train with Adam on mean BCE (+ scaled KL for Bayesian layers) and return
/// the epoch-end checkpoint with the best validation accuracy.
pub fn train(
    init: &ModelParams,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    train_with_history(init, train_set, val_set, cfg).map(|h| h.model)
}

pub fn train_with_history(
    init: &ModelParams,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    init.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let train_y = train_set.labels()?;
    let val_y = val_set.labels()?;
    for ds in [train_set, val_set] {
        if ds.dimension != init.input_dim() {
            return Err(Error::InputShape {
                expected: init.input_dim(),
                got: ds.dimension,
            });
        }
    }
    if cfg.epochs == 0 {
        return Ok(TrainHistory {
            model: init.clone(),
            best_epoch: 0,
            epochs: Vec::new(),
        });
    }

    let n = train_set.len();
    let mut model = init.clone();
    model.seed = cfg.seed;
    let mut params = model.flatten();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut rng = substream(cfg.seed, 0x7EA1);
    let mut order: Vec<usize> = (0..n).collect();
    let kl_scale = cfg.kl_weight / n as f64;
    let has_kl = model.has_bayesian() && cfg.kl_weight > 0.0;

    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut max_raw = 0.0f64;
        let mut max_applied = 0.0f64;
        let mut grad = vec![0.0; params.len()];
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let eps = model.sample_eps(&mut rng);
            let weights = model.realize(&eps);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let masks = model.sample_masks(Mode::Train, &mut rng);
                let loss = model.accumulate_grad(
                    &weights,
                    &eps,
                    &train_set.examples[i].features,
                    train_y[i],
                    &masks,
                    scale,
                    &mut grad,
                )
                .map_err(|e| diverged(e, epoch))?;
                loss_sum += loss;
            }
            drop(weights);
            if has_kl {
                model.accumulate_kl_grad(kl_scale, &mut grad);
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            for g in grad.iter_mut() {
                max_raw = max_raw.max(g.abs());
                if let Some(c) = cfg.gradient_clip {
                    *g = g.clamp(-c, c);
                }
                max_applied = max_applied.max(g.abs());
            }
            adam.step(&mut params, &grad);
            model.set_flat(&params);
        }
        let mut train_loss = loss_sum / n as f64;
        if has_kl {
            train_loss += kl_scale * model.kl_total();
        }
        if !train_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        let val_accuracy =
            accuracy(&model, val_set, &val_y, cfg.seed, epoch).map_err(|e| diverged(e, epoch))?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_accuracy,
            max_raw_grad: max_raw,
            max_applied_grad: max_applied,
        });
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainHistory {
        model,
        best_epoch,
        epochs: history,
    })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NumericOverflow(_) => Error::Divergence { epoch },
        e => e,
    }
}

/// Single-pass eval-mode accuracy; stochastic layers use a per-epoch substream.
fn accuracy(
    model: &ModelParams,
    ds: &LabeledDataset,
    labels: &[u8],
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    let mut rng = substream(seed, 0xACC0_0000 + epoch as u64);
    let mut correct = 0usize;
    for (ex, &y) in ds.examples.iter().zip(labels) {
        let p = model.forward(&ex.features, Mode::Eval, &mut rng)?;
        if u8::from(p >= 0.5) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Example, FeatureMode};
    use crate::nn::LayerKind;
    use rand::Rng;

    /// Two Gaussian blobs separated along (1, 1).
    fn separable(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = crate::rng::rng_from_seed(seed);
        let mut ds = LabeledDataset::new(2, FeatureMode::DenseReal);
        for i in 0..n {
            let y = (i % 2) as u8;
            let c = if y == 1 { 1.5 } else { -1.5 };
            let features = vec![
                c + rng.random_range(-1.0..1.0),
                c + rng.random_range(-1.0..1.0),
            ];
            ds.examples.push(Example {
                id: format!("{i}"),
                features,
                label: Some(y),
                month: None,
            });
        }
        ds
    }

    #[test]
    fn zero_epochs_returns_init() {
        let ds = separable(20, 1);
        let init = ModelParams::mlp(2, &[4], LayerKind::Dense, None, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(train(&init, &ds, &ds, &cfg).unwrap(), init);
    }

    #[test]
    fn empty_split_is_config_error() {
        let ds = separable(20, 1);
        let empty = LabeledDataset::new(2, FeatureMode::DenseReal);
        let init = ModelParams::mlp(2, &[4], LayerKind::Dense, None, 5).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&init, &empty, &ds, &cfg),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train(&init, &ds, &empty, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let ds = separable(80, 2);
        let init = ModelParams::mlp(
            2,
            &[6],
            LayerKind::Bayesian,
            Some(
                crate::nn::DropoutSpec::new(0.3, crate::nn::DropoutPlacement::BeforeEveryLayer, true)
                    .unwrap(),
            ),
            5,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 42,
            ..TrainConfig::default()
        };
        let a = train(&init, &ds, &ds, &cfg).unwrap().flatten();
        let b = train(&init, &ds, &ds, &cfg).unwrap().flatten();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn divergence_names_epoch() {
        let ds = separable(16, 3);
        let init = ModelParams::mlp(2, &[4], LayerKind::Dense, None, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 1e308,
            ..TrainConfig::default()
        };
        match train(&init, &ds, &ds, &cfg) {
            Err(Error::Divergence { epoch }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn clipping_bounds_applied_gradients() {
        let ds = separable(64, 4);
        let init = ModelParams::mlp(2, &[8], LayerKind::Dense, None, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            gradient_clip: Some(0.05),
            ..TrainConfig::default()
        };
        let h = train_with_history(&init, &ds, &ds, &cfg).unwrap();
        for e in &h.epochs {
            assert!(e.max_applied_grad <= 0.05);
        }
        assert!(h.epochs.iter().any(|e| e.max_raw_grad > 0.05));
    }
}
