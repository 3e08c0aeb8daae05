//! Synthetic data under dataset shift, and feature-space evasion attacks.
//!
//! A [`GeneratorConfig`] holds explicit class-conditional parameters:
//! independent Bernoulli activation rates per feature (binary mode) or
//! isotropic Gaussian means (dense mode). Both families have a closed-form
//! Bayes posterior, exposed as [`GeneratorConfig::true_posterior`].
//!
//! Out-of-source and temporal shift move each class's parameters linearly
//! toward a shift target (half the opposite class, half a fresh random
//! profile), clipped to `[0, 1]` for rates. The target is derived from
//! `shift_seed`, never from the sampling seed, so magnitude 0 reproduces
//! the base sampler exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::CalibratedDetector;
use crate::data::{Example, FeatureMode, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, substream};
use crate::util::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ClassParams {
    /// `rates[c][j] = P(feature j = 1 | y = c)`.
    Bernoulli { rates: [Vec<f64>; 2] },
    /// `x | y = c ~ N(means[c], std² I)`.
    Gaussian { means: [Vec<f64>; 2], std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    /// Fraction of the way toward the drift target moved per month.
    pub rate_per_step: f64,
    /// Months after which the drift stops accumulating.
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub dimension: usize,
    pub class_prior: f64,
    pub mode: FeatureMode,
    pub params: ClassParams,
    /// Probability that a sampled label is flipped after drawing features.
    #[serde(default)]
    pub label_noise: f64,
    pub drift: Option<DriftConfig>,
    pub source_shift: Option<f64>,
    /// Seeds the shift and drift targets.
    pub shift_seed: u64,
}

/// Compact description from which [`GeneratorConfig::synthesize`] builds
/// class-conditional parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dimension: usize,
    pub mode: FeatureMode,
    pub class_prior: f64,
    /// Features whose distribution depends on the class, per direction.
    pub informative: usize,
    /// Rate gap (binary) or mean distance (dense) on informative features.
    pub separation: f64,
    pub label_noise: f64,
    pub profile_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dimension: 1024,
            mode: FeatureMode::BinaryDrebinLike,
            class_prior: 0.5,
            informative: 40,
            separation: 0.35,
            label_noise: 0.0,
            profile_seed: 17,
        }
    }
}

fn random_rates<R: Rng + ?Sized>(dimension: usize, rng: &mut R) -> Vec<f64> {
    // sparse activation: most features rarely present
    (0..dimension)
        .map(|_| 0.005 + 0.12 * rng.random::<f64>().powi(3))
        .collect()
}

impl GeneratorConfig {
    pub fn synthesize(spec: &SynthSpec) -> Result<Self> {
        if spec.dimension < 2 {
            return Err(Error::Config("generator dimension must be at least 2".into()));
        }
        if 2 * spec.informative > spec.dimension {
            return Err(Error::Config("too many informative features for the dimension".into()));
        }
        let mut rng = substream(spec.profile_seed, 0x5EED);
        let mut idx: Vec<usize> = (0..spec.dimension).collect();
        idx.shuffle(&mut rng);
        let (mal, rest) = idx.split_at(spec.informative);
        let ben = &rest[..spec.informative];
        let params = match spec.mode {
            FeatureMode::BinaryDrebinLike => {
                let base = random_rates(spec.dimension, &mut rng);
                let mut r0 = base.clone();
                let mut r1 = base;
                for &j in mal {
                    r1[j] = (r1[j] + spec.separation).min(0.95);
                }
                for &j in ben {
                    r0[j] = (r0[j] + spec.separation).min(0.95);
                }
                ClassParams::Bernoulli { rates: [r0, r1] }
            }
            FeatureMode::DenseReal => {
                let mut m0 = vec![0.0; spec.dimension];
                let mut m1 = vec![0.0; spec.dimension];
                let k = (2 * spec.informative).max(1) as f64;
                // total mean distance equals `separation`
                let step = spec.separation / (2.0 * k.sqrt());
                for &j in mal.iter().chain(ben) {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    m1[j] = sign * step;
                    m0[j] = -sign * step;
                }
                ClassParams::Gaussian {
                    means: [m0, m1],
                    std: 1.0,
                }
            }
        };
        let cfg = Self {
            dimension: spec.dimension,
            class_prior: spec.class_prior,
            mode: spec.mode,
            params,
            label_noise: spec.label_noise,
            drift: None,
            source_shift: None,
            shift_seed: derive_seed(spec.profile_seed, 1),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension < 2 {
            return Err(Error::Config("generator dimension must be at least 2".into()));
        }
        if !(self.class_prior > 0.0 && self.class_prior < 1.0) {
            return Err(Error::Config("class_prior must lie in (0, 1)".into()));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must lie in [0, 0.5)".into()));
        }
        match (&self.params, self.mode) {
            (ClassParams::Bernoulli { rates }, FeatureMode::BinaryDrebinLike) => {
                for r in rates {
                    if r.len() != self.dimension || r.iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Err(Error::Config("activation rates must be in [0, 1]".into()));
                    }
                }
            }
            (ClassParams::Gaussian { means, std }, FeatureMode::DenseReal) => {
                if means.iter().any(|m| m.len() != self.dimension) || !(*std > 0.0) {
                    return Err(Error::Config("malformed Gaussian class parameters".into()));
                }
            }
            _ => return Err(Error::Config("class parameters do not match the mode".into())),
        }
        if let Some(d) = self.drift {
            if !(d.rate_per_step >= 0.0) {
                return Err(Error::Config("drift rate must be non-negative".into()));
            }
        }
        if let Some(m) = self.source_shift {
            if !(m >= 0.0) {
                return Err(Error::Config("source shift must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("generator config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Shift target for stream `tag`: half the opposite class, half a fresh
    /// random profile.
    fn target(&self, tag: u64) -> ClassParams {
        let mut rng = substream(self.shift_seed, tag);
        match &self.params {
            ClassParams::Bernoulli { rates } => {
                let fresh = random_rates(self.dimension, &mut rng);
                let t = |c: usize| -> Vec<f64> {
                    rates[1 - c]
                        .iter()
                        .zip(&fresh)
                        .map(|(o, f)| 0.5 * o + 0.5 * f)
                        .collect()
                };
                ClassParams::Bernoulli { rates: [t(0), t(1)] }
            }
            ClassParams::Gaussian { means, std } => {
                let fresh: Vec<f64> = (0..self.dimension)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5)
                    .collect();
                let t = |c: usize| -> Vec<f64> {
                    means[1 - c]
                        .iter()
                        .zip(&fresh)
                        .map(|(o, f)| 0.5 * o + 0.5 * f)
                        .collect()
                };
                ClassParams::Gaussian {
                    means: [t(0), t(1)],
                    std: *std,
                }
            }
        }
    }

    /// Parameters moved `amount` of the way toward the target of `tag`.
    fn moved(&self, tag: u64, amount: f64) -> ClassParams {
        if amount == 0.0 {
            return self.params.clone();
        }
        let lerp = |a: &[f64], b: &[f64], clip: bool| -> Vec<f64> {
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    let v = x + amount * (y - x);
                    if clip {
                        v.clamp(0.0, 1.0)
                    } else {
                        v
                    }
                })
                .collect()
        };
        match (&self.params, self.target(tag)) {
            (ClassParams::Bernoulli { rates }, ClassParams::Bernoulli { rates: t }) => {
                ClassParams::Bernoulli {
                    rates: [lerp(&rates[0], &t[0], true), lerp(&rates[1], &t[1], true)],
                }
            }
            (ClassParams::Gaussian { means, std }, ClassParams::Gaussian { means: t, .. }) => {
                ClassParams::Gaussian {
                    means: [lerp(&means[0], &t[0], false), lerp(&means[1], &t[1], false)],
                    std: *std,
                }
            }
            _ => unreachable!("target family matches params"),
        }
    }

    fn with_params(&self, params: ClassParams) -> Self {
        Self {
            params,
            ..self.clone()
        }
    }

    /// Bayes posterior `P(y = 1 | x)` under the base parameters.
    pub fn true_posterior(&self, x: &[f64]) -> f64 {
        let mut log_odds = (self.class_prior / (1.0 - self.class_prior)).ln();
        match &self.params {
            ClassParams::Bernoulli { rates } => {
                for (j, &v) in x.iter().enumerate() {
                    let (r0, r1) = (rates[0][j].clamp(1e-12, 1.0 - 1e-12), rates[1][j].clamp(1e-12, 1.0 - 1e-12));
                    log_odds += if v != 0.0 {
                        (r1 / r0).ln()
                    } else {
                        ((1.0 - r1) / (1.0 - r0)).ln()
                    };
                }
            }
            ClassParams::Gaussian { means, std } => {
                let s2 = std * std;
                for (j, &v) in x.iter().enumerate() {
                    let (m0, m1) = (means[0][j], means[1][j]);
                    log_odds += ((v - m0).powi(2) - (v - m1).powi(2)) / (2.0 * s2);
                }
            }
        }
        let clean = sigmoid(log_odds);
        (1.0 - self.label_noise) * clean + self.label_noise * (1.0 - clean)
    }

    fn sample(&self, n: usize, seed: u64, month: Option<u32>) -> LabeledDataset {
        let mut rng = rng_from_seed(seed);
        let mut ds = LabeledDataset::new(self.dimension, self.mode);
        ds.examples.reserve(n);
        for i in 0..n {
            let y = u8::from(rng.random::<f64>() < self.class_prior);
            let features: Vec<f64> = match &self.params {
                ClassParams::Bernoulli { rates } => rates[usize::from(y)]
                    .iter()
                    .map(|&r| if rng.random::<f64>() < r { 1.0 } else { 0.0 })
                    .collect(),
                ClassParams::Gaussian { means, std } => means[usize::from(y)]
                    .iter()
                    .map(|&m| m + std * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            };
            let flip = self.label_noise > 0.0 && rng.random::<f64>() < self.label_noise;
            let label = if flip { 1 - y } else { y };
            ds.examples.push(Example {
                id: match month {
                    Some(m) => format!("m{m}-{i}"),
                    None => format!("e{i}"),
                },
                features,
                label: Some(label),
                month,
            });
        }
        ds
    }

    fn provenance(&self, ds: &mut LabeledDataset, generator: &str, seed: u64) {
        ds.set_provenance("generator", generator);
        ds.set_provenance("config_digest", self.digest());
        ds.set_provenance("seed", seed.to_string());
    }
}

const OOS_TAG: u64 = 0x0005;
const DRIFT_TAG: u64 = 0xD41F;

/// In-distribution sample of `n` examples.
pub fn gen_dataset(cfg: &GeneratorConfig, n: usize, seed: u64) -> Result<LabeledDataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let mut ds = cfg.sample(n, seed, None);
    cfg.provenance(&mut ds, "gen_dataset", seed);
    Ok(ds)
}

/// Sample after moving class parameters `magnitude` of the way toward the
/// out-of-source target.
pub fn gen_out_of_source(
    cfg: &GeneratorConfig,
    magnitude: f64,
    n: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    cfg.validate()?;
    if !(magnitude >= 0.0) {
        return Err(Error::Config("shift magnitude must be non-negative".into()));
    }
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let shifted = cfg.with_params(cfg.moved(OOS_TAG, magnitude));
    let mut ds = shifted.sample(n, seed, None);
    cfg.provenance(&mut ds, "gen_out_of_source", seed);
    ds.set_provenance("magnitude", magnitude.to_string());
    Ok(ds)
}

/// Generator parameters after magnitude-`m` out-of-source shift.
pub fn out_of_source_config(cfg: &GeneratorConfig, magnitude: f64) -> GeneratorConfig {
    cfg.with_params(cfg.moved(OOS_TAG, magnitude))
}

/// Sampling seed of month `t`.
pub fn month_seed(seed: u64, month: usize) -> u64 {
    derive_seed(seed, 0x4D00 + month as u64)
}

/// Generator parameters in month `t` of the configured drift.
pub fn drifted_config(cfg: &GeneratorConfig, month: usize) -> Result<GeneratorConfig> {
    let drift = cfg
        .drift
        .ok_or_else(|| Error::Config("temporal generation needs a drift configuration".into()))?;
    let steps = month.min(drift.horizon) as f64;
    Ok(cfg.with_params(cfg.moved(DRIFT_TAG, steps * drift.rate_per_step)))
}

/// Months `0..months`; month `t` samples from parameters advanced `t` drift
/// steps with seed [`month_seed`]`(seed, t)`.
pub fn gen_temporal(
    cfg: &GeneratorConfig,
    months: usize,
    n_per_month: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    cfg.validate()?;
    if months == 0 || n_per_month == 0 {
        return Err(Error::Config("months and n_per_month must be positive".into()));
    }
    (0..months)
        .map(|t| {
            let drifted = drifted_config(cfg, t)?;
            let mut ds = drifted.sample(n_per_month, month_seed(seed, t), Some(t as u32));
            cfg.provenance(&mut ds, "gen_temporal", seed);
            ds.set_provenance("month", t.to_string());
            Ok(ds)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackDirection {
    /// Only 0 → 1 flips; existing features are never removed.
    AddOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct AttackBudget<'a> {
    pub max_flips: usize,
    pub direction: AttackDirection,
    pub surrogate: &'a CalibratedDetector,
    /// Common random numbers for stochastic surrogates.
    pub seed: u64,
}

impl<'a> AttackBudget<'a> {
    pub fn new(max_flips: usize, surrogate: &'a CalibratedDetector, seed: u64) -> Self {
        Self {
            max_flips,
            direction: AttackDirection::AddOnly,
            surrogate,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Greedy,
    Mimicry,
    /// Per-example best of greedy and mimicry.
    Max,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Greedy => "greedy",
            AttackKind::Mimicry => "mimicry",
            AttackKind::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "greedy" => Some(AttackKind::Greedy),
            "mimicry" => Some(AttackKind::Mimicry),
            "max" => Some(AttackKind::Max),
            _ => None,
        }
    }
}

/// Scores inputs with the surrogate's mean malware probability.
struct Scorer<'a> {
    det: &'a CalibratedDetector,
    seed: u64,
}

impl Scorer<'_> {
    fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(self.det.predict(x, &mut rng_from_seed(self.seed))?.mean())
    }

    fn combine(&self, logits: &[f64]) -> f64 {
        let det = self.det;
        let probs = logits.iter().map(|&l| match det.temperature {
            Some(t) => sigmoid(l / t),
            None => sigmoid(l),
        });
        match &det.weights {
            Some(w) => probs.zip(w).map(|(p, w)| p * w).sum::<f64>(),
            None => probs.sum::<f64>() / logits.len() as f64,
        }
        .clamp(0.0, 1.0)
    }

    /// Scores of every single 0 → 1 flip of `x`; `None` entries are features
    /// already present.
    fn flip_scores(&self, x: &[f64]) -> Result<Vec<Option<f64>>> {
        let pres: Option<Vec<Vec<f64>>> = if self.det.is_stochastic() {
            None
        } else {
            self.det
                .members
                .iter()
                .map(|m| m.first_layer_preactivation(x))
                .collect::<Result<Option<Vec<_>>>>()?
        };
        let mut out = vec![None; x.len()];
        let mut cand = x.to_vec();
        for j in 0..x.len() {
            if x[j] != 0.0 {
                continue;
            }
            let s = match &pres {
                Some(pres) => {
                    let logits = self
                        .det
                        .members
                        .iter()
                        .zip(pres)
                        .map(|(m, pre)| {
                            let mut p = pre.clone();
                            m.shift_first_preactivation(&mut p, j, 1.0);
                            m.logit_from_first_preactivation(&p)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    self.combine(&logits)
                }
                None => {
                    cand[j] = 1.0;
                    let s = self.score(&cand)?;
                    cand[j] = 0.0;
                    s
                }
            };
            out[j] = Some(s);
        }
        Ok(out)
    }
}

fn check_binary(x: &[f64]) -> Result<()> {
    if x.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Mode("attacks need binary feature vectors".into()));
    }
    Ok(())
}

fn check_dim(x: &[f64], det: &CalibratedDetector) -> Result<()> {
    if x.len() != det.input_dim() {
        return Err(Error::InputShape {
            expected: det.input_dim(),
            got: x.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyTrace {
    pub features: Vec<f64>,
    /// Flipped feature indices in order.
    pub flips: Vec<usize>,
    /// Surrogate score before the first flip and after each flip.
    pub scores: Vec<f64>,
}

/// Greedy add-only ascent: repeatedly flip the absent feature whose addition
/// lowers the surrogate's malware probability the most.
pub fn attack_greedy_flip_trace(x: &[f64], budget: &AttackBudget<'_>) -> Result<GreedyTrace> {
    check_binary(x)?;
    check_dim(x, budget.surrogate)?;
    let scorer = Scorer {
        det: budget.surrogate,
        seed: budget.seed,
    };
    let mut cur = x.to_vec();
    let mut score = scorer.score(&cur)?;
    let mut trace = GreedyTrace {
        features: Vec::new(),
        flips: Vec::new(),
        scores: vec![score],
    };
    for _ in 0..budget.max_flips {
        let mut best: Option<(usize, f64)> = None;
        for (j, s) in scorer.flip_scores(&cur)?.into_iter().enumerate() {
            if let Some(s) = s {
                if best.is_none_or(|(_, b)| s < b) {
                    best = Some((j, s));
                }
            }
        }
        match best {
            Some((j, s)) if s < score => {
                cur[j] = 1.0;
                score = s;
                trace.flips.push(j);
                trace.scores.push(score);
            }
            _ => break,
        }
    }
    trace.features = cur;
    Ok(trace)
}

pub fn attack_greedy_flip(x: &[f64], budget: &AttackBudget<'_>) -> Result<Vec<f64>> {
    attack_greedy_flip_trace(x, budget).map(|t| t.features)
}

/// `x` with the features of `template` it lacks added, in index order, up
/// to `max_flips` additions.
pub fn merge_add_only(x: &[f64], template: &[f64], max_flips: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    let mut added = 0;
    for (o, &t) in out.iter_mut().zip(template) {
        if added == max_flips {
            break;
        }
        if *o == 0.0 && t != 0.0 {
            *o = 1.0;
            added += 1;
        }
    }
    out
}

/// Mimicry: merge each benign template into `x` under the budget and keep
/// the merge the surrogate finds least malicious (earliest on ties).
pub fn attack_mimicry(
    x: &[f64],
    benign_pool: &LabeledDataset,
    budget: &AttackBudget<'_>,
) -> Result<Vec<f64>> {
    check_binary(x)?;
    check_dim(x, budget.surrogate)?;
    if benign_pool.is_empty() {
        return Err(Error::Config("mimicry needs a non-empty benign pool".into()));
    }
    let scorer = Scorer {
        det: budget.surrogate,
        seed: budget.seed,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for ex in &benign_pool.examples {
        check_binary(&ex.features)?;
        let merged = merge_add_only(x, &ex.features, budget.max_flips);
        let s = scorer.score(&merged)?;
        if best.as_ref().is_none_or(|(b, _)| s < *b) {
            best = Some((s, merged));
        }
    }
    Ok(best.expect("pool is non-empty").1)
}

/// Per-example best of greedy and mimicry (greedy on ties).
pub fn attack_max(
    x: &[f64],
    benign_pool: &LabeledDataset,
    budget: &AttackBudget<'_>,
) -> Result<Vec<f64>> {
    let scorer = Scorer {
        det: budget.surrogate,
        seed: budget.seed,
    };
    let g = attack_greedy_flip(x, budget)?;
    let m = attack_mimicry(x, benign_pool, budget)?;
    if scorer.score(&m)? < scorer.score(&g)? {
        Ok(m)
    } else {
        Ok(g)
    }
}

/// Attack every malicious example of `ds`; benign examples are dropped.
/// Example `i` uses budget seed `derive_seed(seed, i)`.
pub fn attack_dataset(
    ds: &LabeledDataset,
    kind: AttackKind,
    max_flips: usize,
    surrogate: &CalibratedDetector,
    benign_pool: &LabeledDataset,
    seed: u64,
) -> Result<LabeledDataset> {
    if ds.mode != FeatureMode::BinaryDrebinLike {
        return Err(Error::Mode("attacks need a binary dataset".into()));
    }
    let mut out = LabeledDataset::new(ds.dimension, ds.mode);
    out.provenance = ds.provenance.clone();
    out.set_provenance("attack", kind.as_str());
    out.set_provenance("attack_budget", max_flips.to_string());
    out.set_provenance("attack_seed", seed.to_string());
    for (i, ex) in ds.examples.iter().enumerate() {
        if ex.label != Some(1) {
            continue;
        }
        let budget = AttackBudget::new(max_flips, surrogate, derive_seed(seed, i as u64));
        let features = match kind {
            AttackKind::Greedy => attack_greedy_flip(&ex.features, &budget)?,
            AttackKind::Mimicry => attack_mimicry(&ex.features, benign_pool, &budget)?,
            AttackKind::Max => attack_max(&ex.features, benign_pool, &budget)?,
        };
        out.examples.push(Example {
            id: format!("{}-{}", ex.id, kind.as_str()),
            features,
            label: Some(1),
            month: ex.month,
        });
    }
    Ok(out)
}
