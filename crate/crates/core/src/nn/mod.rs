//! Feed-forward network engine: dense, dropout and Bayesian-dense layers with
//! ReLU hidden activations and a single sigmoid output unit.
//!
//! Stochasticity is isolated in [`Noise`]: dropout masks and the standard
//! normal draws used to reparameterise Bayesian weights. Every forward and
//! backward routine is a pure function of `(parameters, input, noise)`, which
//! is what makes finite-difference gradient checks through sampled layers
//! possible.

mod checkpoint;
mod gradcheck;
mod train;

use std::borrow::Cow;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{clamp_prob, sigmoid};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use gradcheck::{grad_check, grad_check_with_noise};
pub use train::{train, train_with_history, EpochStats, TrainConfig, TrainHistory};

/// Binary cross-entropy with the probability clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(p: f64, y: u8) -> f64 {
    let p = clamp_prob(p);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Factorised-Gaussian weight posterior with `std = softplus(spread_raw)`.
/// The bias is a point estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesianDenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub mean: Vec<f64>,
    pub spread_raw: Vec<f64>,
    pub bias: Vec<f64>,
    pub prior_std: f64,
}

impl BayesianDenseLayer {
    pub fn std_at(&self, k: usize) -> f64 {
        softplus(self.spread_raw[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layer {
    Dense(DenseLayer),
    Bayesian(BayesianDenseLayer),
}

impl Layer {
    pub fn inputs(&self) -> usize {
        match self {
            Layer::Dense(l) => l.inputs,
            Layer::Bayesian(l) => l.inputs,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            Layer::Dense(l) => l.outputs,
            Layer::Bayesian(l) => l.outputs,
        }
    }

    pub fn param_count(&self) -> usize {
        let w = self.inputs() * self.outputs();
        match self {
            Layer::Dense(_) => w + self.outputs(),
            Layer::Bayesian(_) => 2 * w + self.outputs(),
        }
    }

    pub fn is_bayesian(&self) -> bool {
        matches!(self, Layer::Bayesian(_))
    }

    fn bias(&self) -> &[f64] {
        match self {
            Layer::Dense(l) => &l.bias,
            Layer::Bayesian(l) => &l.bias,
        }
    }

    fn check(&self) -> Result<()> {
        let (i, o) = (self.inputs(), self.outputs());
        let ok = match self {
            Layer::Dense(l) => l.weights.len() == i * o && l.bias.len() == o,
            Layer::Bayesian(l) => {
                l.mean.len() == i * o
                    && l.spread_raw.len() == i * o
                    && l.bias.len() == o
                    && l.prior_std > 0.0
            }
        };
        if !ok || i == 0 || o == 0 {
            return Err(Error::Config(format!("malformed {i}x{o} layer")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutPlacement {
    BeforeEveryLayer,
    BeforeOutputOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub rate: f64,
    pub placement: DropoutPlacement,
    /// Keep sampling masks in eval mode (Monte Carlo dropout).
    pub active_at_eval: bool,
}

impl DropoutSpec {
    pub fn new(rate: f64, placement: DropoutPlacement, active_at_eval: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self {
            rate,
            placement,
            active_at_eval,
        })
    }
}

/// Layer family used by [`ModelParams::mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    Bayesian,
}

/// Initial value of `spread_raw` for fresh Bayesian layers (std ≈ 6.7e-3).
pub const INITIAL_SPREAD_RAW: f64 = -5.0;
pub const DEFAULT_PRIOR_STD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
    pub dropout: Option<DropoutSpec>,
    /// Seed used for initialisation / training; recorded in checkpoints.
    pub seed: u64,
}

/// Per-pass random state: one optional dropout mask per layer input and one
/// optional standard-normal matrix per Bayesian layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Noise {
    pub masks: Vec<Option<Vec<f64>>>,
    pub eps: Vec<Option<Vec<f64>>>,
}

/// Forward activations kept for backpropagation.
struct Trace {
    /// Input to each layer after masking.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

impl ModelParams {
    /// An MLP `input -> hidden... -> 1` with He-uniform weights and zero biases.
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        kind: LayerKind,
        dropout: Option<DropoutSpec>,
        seed: u64,
    ) -> Result<Self> {
        if input == 0 || hidden.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        let mut rng = crate::rng::substream(seed, 0x1417);
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let limit = (6.0 / i as f64).sqrt();
                let weights: Vec<f64> = (0..i * o)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                match kind {
                    LayerKind::Dense => Layer::Dense(DenseLayer {
                        inputs: i,
                        outputs: o,
                        weights,
                        bias: vec![0.0; o],
                    }),
                    LayerKind::Bayesian => Layer::Bayesian(BayesianDenseLayer {
                        inputs: i,
                        outputs: o,
                        mean: weights,
                        spread_raw: vec![INITIAL_SPREAD_RAW; i * o],
                        bias: vec![0.0; o],
                        prior_std: DEFAULT_PRIOR_STD,
                    }),
                }
            })
            .collect();
        let model = Self {
            layers,
            dropout,
            seed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for l in &self.layers {
            l.check()?;
        }
        for w in self.layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::Config(format!(
                    "layer output {} does not feed input {}",
                    w[0].outputs(),
                    w[1].inputs()
                )));
            }
        }
        if self.layers.last().map(Layer::outputs) != Some(1) {
            return Err(Error::Config("output layer must have a single unit".into()));
        }
        if let Some(d) = &self.dropout {
            DropoutSpec::new(d.rate, d.placement, d.active_at_eval)?;
        }
        if !self.flatten().iter().all(|v| v.is_finite()) {
            return Err(Error::NumericOverflow("non-finite model parameter".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn has_bayesian(&self) -> bool {
        self.layers.iter().any(Layer::is_bayesian)
    }

    /// True when eval-mode forward passes consume randomness.
    pub fn is_stochastic_at_eval(&self) -> bool {
        self.has_bayesian()
            || self
                .dropout
                .is_some_and(|d| d.active_at_eval && d.rate > 0.0)
    }

    fn dropout_before(&self, layer: usize, mode: Mode) -> Option<f64> {
        let d = self.dropout?;
        if d.rate == 0.0 || (mode == Mode::Eval && !d.active_at_eval) {
            return None;
        }
        let applies = match d.placement {
            DropoutPlacement::BeforeEveryLayer => true,
            DropoutPlacement::BeforeOutputOnly => layer + 1 == self.layers.len(),
        };
        applies.then_some(d.rate)
    }

    /// Draw dropout masks for one example.
    pub fn sample_masks<R: Rng + ?Sized>(&self, mode: Mode, rng: &mut R) -> Vec<Option<Vec<f64>>> {
        (0..self.layers.len())
            .map(|i| {
                self.dropout_before(i, mode).map(|rate| {
                    let keep = 1.0 / (1.0 - rate);
                    (0..self.layers[i].inputs())
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                        .collect()
                })
            })
            .collect()
    }

    /// Draw reparameterisation noise for every Bayesian layer.
    pub fn sample_eps<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Option<Vec<f64>>> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Bayesian(b) => Some(
                    (0..b.mean.len())
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                ),
                Layer::Dense(_) => None,
            })
            .collect()
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, mode: Mode, rng: &mut R) -> Noise {
        let masks = self.sample_masks(mode, rng);
        let eps = self.sample_eps(rng);
        Noise { masks, eps }
    }

    /// Noise with every mask inactive and every Bayesian draw at zero, i.e.
    /// the posterior-mean network.
    pub fn null_noise(&self) -> Noise {
        Noise {
            masks: vec![None; self.layers.len()],
            eps: vec![None; self.layers.len()],
        }
    }

    /// Effective weight matrices under the given reparameterisation noise.
    pub fn realize<'a>(&'a self, eps: &[Option<Vec<f64>>]) -> Vec<Cow<'a, [f64]>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                Layer::Dense(d) => Cow::Borrowed(d.weights.as_slice()),
                Layer::Bayesian(b) => match eps.get(i).and_then(|e| e.as_ref()) {
                    Some(e) => Cow::Owned(
                        b.mean
                            .iter()
                            .zip(&b.spread_raw)
                            .zip(e)
                            .map(|((m, r), z)| m + softplus(*r) * z)
                            .collect(),
                    ),
                    None => Cow::Borrowed(b.mean.as_slice()),
                },
            })
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::InputShape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn run(
        &self,
        weights: &[Cow<'_, [f64]>],
        x: &[f64],
        masks: &[Option<Vec<f64>>],
        keep_trace: bool,
    ) -> Result<(f64, Option<Trace>)> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut trace = keep_trace.then(|| Trace {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
        });
        let mut act: Vec<f64> = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(Some(mask)) = masks.get(i) {
                for (a, m) in act.iter_mut().zip(mask) {
                    *a *= m;
                }
            }
            let pre = affine(&weights[i], layer.bias(), &act, layer.inputs());
            let next = if i + 1 < n {
                pre.iter().map(|&v| v.max(0.0)).collect()
            } else {
                pre.clone()
            };
            if let Some(t) = trace.as_mut() {
                t.inputs.push(std::mem::take(&mut act));
                t.pre.push(pre);
            }
            act = next;
        }
        let logit = act[0];
        if !logit.is_finite() {
            return Err(Error::NumericOverflow(format!("logit is {logit}")));
        }
        Ok((logit, trace))
    }

    pub fn logit_with_noise(&self, x: &[f64], noise: &Noise) -> Result<f64> {
        let w = self.realize(&noise.eps);
        self.run(&w, x, &noise.masks, false).map(|r| r.0)
    }

    /// Logit with pre-realised weights; used when many inputs share one
    /// weight sample.
    pub fn logit_with_weights(
        &self,
        weights: &[Cow<'_, [f64]>],
        x: &[f64],
        masks: &[Option<Vec<f64>>],
    ) -> Result<f64> {
        self.run(weights, x, masks, false).map(|r| r.0)
    }

    pub fn logit<R: Rng + ?Sized>(&self, x: &[f64], mode: Mode, rng: &mut R) -> Result<f64> {
        let noise = self.sample_noise(mode, rng);
        self.logit_with_noise(x, &noise)
    }

    /// `p(y = 1 | x, θ)` for one pass under `mode`.
    pub fn forward<R: Rng + ?Sized>(&self, x: &[f64], mode: Mode, rng: &mut R) -> Result<f64> {
        self.logit(x, mode, rng).map(sigmoid)
    }

    /// BCE loss of one example and its gradient w.r.t. the flattened
    /// parameters (see [`ModelParams::flatten`]), under frozen noise.
    pub fn loss_and_grad(&self, x: &[f64], y: u8, noise: &Noise) -> Result<(f64, Vec<f64>)> {
        let w = self.realize(&noise.eps);
        let mut grad = vec![0.0; self.param_count()];
        let loss = self.accumulate_grad(&w, &noise.eps, x, y, &noise.masks, 1.0, &mut grad)?;
        Ok((loss, grad))
    }

    /// Backpropagate one example, adding `scale × ∂loss/∂θ` into `grad`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn accumulate_grad(
        &self,
        weights: &[Cow<'_, [f64]>],
        eps: &[Option<Vec<f64>>],
        x: &[f64],
        y: u8,
        masks: &[Option<Vec<f64>>],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let (logit, trace) = self.run(weights, x, masks, true)?;
        let trace = trace.expect("trace requested");
        let p = sigmoid(logit);
        let loss = bce_loss(p, y);
        let offsets = self.param_offsets();
        let mut delta = vec![(p - f64::from(y)) * scale];
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let (nin, nout) = (layer.inputs(), layer.outputs());
            let u = &trace.inputs[i];
            let off = offsets[i];
            let w = &weights[i];
            let nw = nin * nout;
            let (gw_off, gb_off) = match layer {
                Layer::Dense(_) => (off, off + nw),
                Layer::Bayesian(_) => (off, off + 2 * nw),
            };
            for o in 0..nout {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[gw_off + o * nin..gw_off + (o + 1) * nin];
                for (g, ui) in row.iter_mut().zip(u) {
                    *g += d * ui;
                }
                grad[gb_off + o] += d;
            }
            if let Layer::Bayesian(b) = layer {
                if let Some(Some(e)) = eps.get(i) {
                    // ∂W/∂ρ = ε · sigmoid(ρ)
                    for o in 0..nout {
                        let d = delta[o];
                        if d == 0.0 {
                            continue;
                        }
                        for k in 0..nin {
                            let idx = o * nin + k;
                            grad[off + nw + idx] += d * u[k] * e[idx] * sigmoid(b.spread_raw[idx]);
                        }
                    }
                }
            }
            if i == 0 {
                break;
            }
            let mut dprev = vec![0.0; nin];
            for o in 0..nout {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (dp, wv) in dprev.iter_mut().zip(&w[o * nin..(o + 1) * nin]) {
                    *dp += d * wv;
                }
            }
            if let Some(Some(mask)) = masks.get(i) {
                for (dp, m) in dprev.iter_mut().zip(mask) {
                    *dp *= m;
                }
            }
            let pre_prev = &trace.pre[i - 1];
            for (dp, z) in dprev.iter_mut().zip(pre_prev) {
                if *z <= 0.0 {
                    *dp = 0.0;
                }
            }
            delta = dprev;
        }
        Ok(loss)
    }

    /// First-layer pre-activation `W₀x + b₀` of a deterministic network
    /// whose first layer is dense; `None` when eval passes are stochastic.
    pub fn first_layer_preactivation(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        self.check_input(x)?;
        match &self.layers[0] {
            Layer::Dense(d) if !self.is_stochastic_at_eval() => {
                Ok(Some(affine(&d.weights, &d.bias, x, d.inputs)))
            }
            _ => Ok(None),
        }
    }

    /// Add `delta × column j` of the first dense layer into `pre`.
    pub fn shift_first_preactivation(&self, pre: &mut [f64], j: usize, delta: f64) {
        if let Layer::Dense(d) = &self.layers[0] {
            for (o, v) in pre.iter_mut().enumerate() {
                *v += delta * d.weights[o * d.inputs + j];
            }
        }
    }

    /// Finish an eval-mode pass of a deterministic network from the first
    /// layer's pre-activation.
    pub fn logit_from_first_preactivation(&self, pre: &[f64]) -> Result<f64> {
        let n = self.layers.len();
        let mut act: Vec<f64> = if n == 1 {
            pre.to_vec()
        } else {
            pre.iter().map(|&v| v.max(0.0)).collect()
        };
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let w = match layer {
                Layer::Dense(d) => &d.weights,
                Layer::Bayesian(b) => &b.mean,
            };
            let z = affine(w, layer.bias(), &act, layer.inputs());
            act = if i + 1 < n {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                z
            };
        }
        let logit = act[0];
        if !logit.is_finite() {
            return Err(Error::NumericOverflow(format!("logit is {logit}")));
        }
        Ok(logit)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = off;
                off += l.param_count();
                o
            })
            .collect()
    }

    /// Parameters in layer order; per layer: dense `weights, bias`, Bayesian
    /// `mean, spread_raw, bias`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            match l {
                Layer::Dense(d) => {
                    out.extend_from_slice(&d.weights);
                    out.extend_from_slice(&d.bias);
                }
                Layer::Bayesian(b) => {
                    out.extend_from_slice(&b.mean);
                    out.extend_from_slice(&b.spread_raw);
                    out.extend_from_slice(&b.bias);
                }
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut rest = flat;
        let mut take = |dst: &mut Vec<f64>| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => {
                    take(&mut d.weights);
                    take(&mut d.bias);
                }
                Layer::Bayesian(b) => {
                    take(&mut b.mean);
                    take(&mut b.spread_raw);
                    take(&mut b.bias);
                }
            }
        }
    }

    /// Total KL divergence of all Bayesian layers from their priors.
    pub fn kl_total(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Bayesian(b) => kl_gaussian(b),
                Layer::Dense(_) => 0.0,
            })
            .sum()
    }

    /// Add `scale × ∂KL/∂θ` into a flattened gradient.
    pub fn accumulate_kl_grad(&self, scale: f64, grad: &mut [f64]) {
        let offsets = self.param_offsets();
        for (l, off) in self.layers.iter().zip(offsets) {
            if let Layer::Bayesian(b) = l {
                let nw = b.mean.len();
                let pv = b.prior_std * b.prior_std;
                for k in 0..nw {
                    let s = b.std_at(k);
                    grad[off + k] += scale * b.mean[k] / pv;
                    let dsigma = -1.0 / s + s / pv;
                    grad[off + nw + k] += scale * dsigma * sigmoid(b.spread_raw[k]);
                }
            }
        }
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], nin: usize) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, bias)| {
            let row = &w[o * nin..(o + 1) * nin];
            bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect()
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, σ_p²))` summed over all weight entries.
pub fn kl_gaussian(layer: &BayesianDenseLayer) -> f64 {
    let sp = layer.prior_std;
    layer
        .mean
        .iter()
        .zip(&layer.spread_raw)
        .map(|(&m, &r)| kl_entry(m, softplus(r), sp))
        .sum()
}

#[inline]
fn kl_entry(mean: f64, std: f64, prior_std: f64) -> f64 {
    (prior_std / std).ln() + (std * std + mean * mean) / (2.0 * prior_std * prior_std) - 0.5
}
