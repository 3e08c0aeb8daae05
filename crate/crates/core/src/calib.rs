//! Six calibration strategies behind a single predictive interface.
//!
//! | kind           | members | stochastic passes | post-processing        |
//! |----------------|---------|-------------------|------------------------|
//! | `vanilla`      | 1       | 1                 | –                      |
//! | `temp-scaling` | 1       | 1                 | temperature on logits  |
//! | `mc-dropout`   | 1       | T                 | –                      |
//! | `vbi`          | 1       | T                 | –                      |
//! | `ensemble`     | K       | 1 per member      | –                      |
//! | `w-ensemble`   | K       | 1 per member      | simplex vote weights   |
//!
//! Post-processing only reads member outputs on the validation split; member
//! parameters are never modified by it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{
    self, bce_loss, DropoutPlacement, DropoutSpec, LayerKind, Mode, ModelParams, TrainConfig,
};
use crate::rng::{derive_seed, substream};
use crate::util::{self, clamp_prob, sigmoid};

/// Member probabilities with simplex weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSample {
    member_probs: Vec<f64>,
    weights: Vec<f64>,
}

impl PredictiveSample {
    pub fn new(member_probs: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if member_probs.is_empty() || member_probs.len() != weights.len() {
            return Err(Error::Config(format!(
                "predictive sample needs T >= 1 probabilities with matching weights, got {} / {}",
                member_probs.len(),
                weights.len()
            )));
        }
        if member_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("member probability outside [0, 1]".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "weights must be non-negative and sum to 1, sum is {total}"
            )));
        }
        Ok(Self {
            member_probs,
            weights,
        })
    }

    pub fn uniform(member_probs: Vec<f64>) -> Result<Self> {
        let t = member_probs.len().max(1);
        Self::new(member_probs, vec![1.0 / t as f64; t])
    }

    pub fn single(p: f64) -> Self {
        Self {
            member_probs: vec![p],
            weights: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.member_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_probs.is_empty()
    }

    pub fn member_probs(&self) -> &[f64] {
        &self.member_probs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.member_probs
            .iter()
            .copied()
            .zip(self.weights.iter().copied())
    }

    /// `Σ w_i p_i`, clipped into `[0, 1]` against rounding. Equal weights
    /// give the plain arithmetic mean.
    pub fn mean(&self) -> f64 {
        let m = if self.weights.iter().all(|w| *w == self.weights[0]) {
            self.member_probs.iter().sum::<f64>() / self.len() as f64
        } else {
            self.iter().map(|(p, w)| w * p).sum::<f64>()
        };
        m.clamp(0.0, 1.0)
    }
}

/// Label decision: malicious iff the weighted mean is at least 0.5.
pub fn decide(sample: &PredictiveSample) -> u8 {
    u8::from(sample.mean() >= 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    Vanilla,
    TempScaling,
    McDropout,
    Vbi,
    Ensemble,
    WEnsemble,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 6] = [
        DetectorKind::Vanilla,
        DetectorKind::TempScaling,
        DetectorKind::McDropout,
        DetectorKind::Vbi,
        DetectorKind::Ensemble,
        DetectorKind::WEnsemble,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::Vanilla => "vanilla",
            DetectorKind::TempScaling => "temp-scaling",
            DetectorKind::McDropout => "mc-dropout",
            DetectorKind::Vbi => "vbi",
            DetectorKind::Ensemble => "ensemble",
            DetectorKind::WEnsemble => "w-ensemble",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn is_ensemble(self) -> bool {
        matches!(self, DetectorKind::Ensemble | DetectorKind::WEnsemble)
    }
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedDetector {
    pub kind: DetectorKind,
    pub members: Vec<ModelParams>,
    pub temperature: Option<f64>,
    pub weights: Option<Vec<f64>>,
    pub samples_per_prediction: usize,
}

impl CalibratedDetector {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{} detector: {m}", self.kind)));
        if self.members.is_empty() {
            return bad("no members");
        }
        if !self.kind.is_ensemble() && self.members.len() != 1 {
            return bad("expected exactly one member");
        }
        match (self.kind, self.temperature) {
            (DetectorKind::TempScaling, Some(t)) if t > 0.0 && t.is_finite() => {}
            (DetectorKind::TempScaling, _) => return bad("missing or invalid temperature"),
            (_, Some(_)) => return bad("temperature only applies to temp-scaling"),
            _ => {}
        }
        match (self.kind, &self.weights) {
            (DetectorKind::WEnsemble, Some(w)) => {
                PredictiveSample::new(vec![0.5; w.len()], w.clone())?;
                if w.len() != self.members.len() {
                    return bad("weight count differs from member count");
                }
            }
            (DetectorKind::WEnsemble, None) => return bad("missing weights"),
            (_, Some(_)) => return bad("weights only apply to w-ensemble"),
            _ => {}
        }
        if self.samples_per_prediction == 0 {
            return bad("samples_per_prediction must be positive");
        }
        let dim = self.input_dim();
        for m in &self.members {
            m.validate()?;
            if m.input_dim() != dim {
                return bad("members disagree on input dimension");
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    /// True when a prediction consumes randomness.
    pub fn is_stochastic(&self) -> bool {
        self.members.iter().any(ModelParams::is_stochastic_at_eval)
    }

    pub fn predict<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<PredictiveSample> {
        if x.len() != self.input_dim() {
            return Err(Error::InputShape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        match self.kind {
            DetectorKind::Vanilla => Ok(PredictiveSample::single(
                self.members[0].forward(x, Mode::Eval, rng)?,
            )),
            DetectorKind::TempScaling => {
                let t = self.temperature.unwrap_or(1.0);
                let logit = self.members[0].logit(x, Mode::Eval, rng)?;
                Ok(PredictiveSample::single(apply_temperature(logit, t)))
            }
            DetectorKind::McDropout | DetectorKind::Vbi => {
                let m = &self.members[0];
                let probs = (0..self.samples_per_prediction)
                    .map(|_| m.forward(x, Mode::Eval, rng))
                    .collect::<Result<Vec<_>>>()?;
                PredictiveSample::uniform(probs)
            }
            DetectorKind::Ensemble => {
                let probs = self.member_probs(x, rng)?;
                PredictiveSample::uniform(probs)
            }
            DetectorKind::WEnsemble => {
                let probs = self.member_probs(x, rng)?;
                let w = self.weights.clone().expect("validated w-ensemble");
                PredictiveSample::new(probs, w)
            }
        }
    }

    fn member_probs<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.members
            .iter()
            .map(|m| m.forward(x, Mode::Eval, rng))
            .collect()
    }

    /// Predict every example of `ds`; example `i` uses substream `i` of `seed`.
    pub fn predict_dataset(&self, ds: &LabeledDataset, seed: u64) -> Result<Vec<PredictiveSample>> {
        ds.examples
            .iter()
            .enumerate()
            .map(|(i, ex)| self.predict(&ex.features, &mut substream(seed, i as u64)))
            .collect()
    }
}

pub fn apply_temperature(logit: f64, temperature: f64) -> f64 {
    sigmoid(logit / temperature)
}

fn temperature_nll(logits: &[f64], labels: &[u8], t: f64) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| bce_loss(apply_temperature(l, t), y))
        .sum::<f64>()
        / logits.len() as f64
}

/// Search bounds for `ln T`.
const LOG_T_RANGE: (f64, f64) = (-2.0 * std::f64::consts::LN_10, 2.0 * std::f64::consts::LN_10);

/// Validation-NLL-minimising temperature via golden-section search over
/// `ln T ∈ [-2 ln 10, 2 ln 10]`. Never worse than `T = 1`.
pub fn fit_temperature(logits: &[f64], labels: &[u8]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Config("logits and labels must be non-empty and aligned".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NumericOverflow("non-finite validation logit".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateValidation(
            "temperature fitting needs both classes in the validation set".into(),
        ));
    }
    let f = |u: f64| temperature_nll(logits, labels, u.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LOG_T_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-6 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let t = ((a + b) / 2.0).exp();
    if temperature_nll(logits, labels, t) <= temperature_nll(logits, labels, 1.0) {
        Ok(t)
    } else {
        Ok(1.0)
    }
}

/// Fixed-step softmax-parameterised descent on validation NLL of the
/// weighted vote. Inputs are `probs[member][example]`.
pub fn fit_weights_from_probs(probs: &[Vec<f64>], labels: &[u8]) -> Result<Vec<f64>> {
    const STEPS: usize = 2000;
    const STEP_SIZE: f64 = 1.0;
    let t = probs.len();
    if t == 0 {
        return Err(Error::Config("weight fitting needs at least one member".into()));
    }
    if labels.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    if probs.iter().any(|p| p.len() != labels.len()) {
        return Err(Error::Config("member predictions misaligned with labels".into()));
    }
    let uniform = vec![1.0 / t as f64; t];
    if t == 1 {
        return Ok(vec![1.0]);
    }
    let objective = |w: &[f64]| -> f64 {
        (0..labels.len())
            .map(|n| {
                let pbar: f64 = (0..t).map(|i| w[i] * probs[i][n]).sum();
                bce_loss(pbar, labels[n])
            })
            .sum::<f64>()
            / labels.len() as f64
    };
    let mut alpha = vec![0.0f64; t];
    let mut w = uniform.clone();
    for _ in 0..STEPS {
        let mut g = vec![0.0f64; t];
        for n in 0..labels.len() {
            let pbar = clamp_prob((0..t).map(|i| w[i] * probs[i][n]).sum());
            let dp = (pbar - f64::from(labels[n])) / (pbar * (1.0 - pbar));
            for i in 0..t {
                g[i] += dp * probs[i][n];
            }
        }
        let inv = 1.0 / labels.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        let gbar: f64 = w.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut moved = false;
        for k in 0..t {
            let step = STEP_SIZE * w[k] * (g[k] - gbar);
            if step != 0.0 {
                moved = true;
            }
            alpha[k] -= step;
        }
        if !moved {
            break;
        }
        w = softmax(&alpha);
    }
    if objective(&w) < objective(&uniform) {
        Ok(w)
    } else {
        Ok(uniform)
    }
}

fn softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Simplex vote weights fitted on validation predictions of each member.
pub fn fit_ensemble_weights(members: &[ModelParams], val: &LabeledDataset) -> Result<Vec<f64>> {
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let labels = val.labels()?;
    let probs = members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            val.examples
                .iter()
                .enumerate()
                .map(|(n, ex)| {
                    let mut rng = substream(derive_seed(m.seed, i as u64), n as u64);
                    m.forward(&ex.features, Mode::Eval, &mut rng)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    fit_weights_from_probs(&probs, &labels)
}

/// Architecture and roster options shared by every detector kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub kind: DetectorKind,
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub ensemble_size: usize,
    pub samples_per_prediction: usize,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self {
            kind: DetectorKind::Vanilla,
            hidden: vec![32, 32],
            dropout_rate: 0.4,
            ensemble_size: 10,
            samples_per_prediction: 10,
        }
    }
}

impl DetectorSpec {
    fn member_init(&self, input: usize, seed: u64) -> Result<ModelParams> {
        let (kind, placement, at_eval) = match self.kind {
            DetectorKind::McDropout => (LayerKind::Dense, DropoutPlacement::BeforeEveryLayer, true),
            DetectorKind::Vbi => (LayerKind::Bayesian, DropoutPlacement::BeforeOutputOnly, false),
            _ => (LayerKind::Dense, DropoutPlacement::BeforeOutputOnly, false),
        };
        let dropout = DropoutSpec::new(self.dropout_rate, placement, at_eval)?;
        ModelParams::mlp(input, &self.hidden, kind, Some(dropout), seed)
    }

    pub fn member_count(&self) -> usize {
        if self.kind.is_ensemble() {
            self.ensemble_size
        } else {
            1
        }
    }

    /// Seed of member `i` derived from the training seed.
    pub fn member_seed(seed: u64, i: usize) -> u64 {
        derive_seed(seed, i as u64)
    }
}

/// Train every member, then run the post-processing the kind requires.
pub fn train_detector(
    spec: &DetectorSpec,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<CalibratedDetector> {
    let det = train_members(spec, train, val, cfg)?;
    calibrate(det, val)
}

/// Member training only; the returned detector has no temperature or
/// weights yet, so it is only valid once passed through [`calibrate`].
pub fn train_members(
    spec: &DetectorSpec,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<CalibratedDetector> {
    if spec.kind.is_ensemble() && spec.ensemble_size == 0 {
        return Err(Error::Config("ensemble size must be positive".into()));
    }
    if spec.samples_per_prediction == 0 {
        return Err(Error::Config("samples_per_prediction must be positive".into()));
    }
    let members = (0..spec.member_count())
        .map(|i| {
            let seed = DetectorSpec::member_seed(cfg.seed, i);
            let init = spec.member_init(train.dimension, seed)?;
            let member_cfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            nn::train(&init, train, val, &member_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibratedDetector {
        kind: spec.kind,
        members,
        temperature: None,
        weights: None,
        samples_per_prediction: spec.samples_per_prediction,
    })
}

/// Post-hoc step: fit the temperature or vote weights on `val`.
pub fn calibrate(mut det: CalibratedDetector, val: &LabeledDataset) -> Result<CalibratedDetector> {
    match det.kind {
        DetectorKind::TempScaling => {
            let labels = val.labels()?;
            let m = &det.members[0];
            let logits = val
                .examples
                .iter()
                .enumerate()
                .map(|(n, ex)| m.logit(&ex.features, Mode::Eval, &mut substream(m.seed, n as u64)))
                .collect::<Result<Vec<_>>>()?;
            det.temperature = Some(fit_temperature(&logits, &labels)?);
        }
        DetectorKind::WEnsemble => {
            det.weights = Some(fit_ensemble_weights(&det.members, val)?);
        }
        _ => {}
    }
    det.validate()?;
    Ok(det)
}

pub const BUNDLE_FORMAT: &str = "detcal-bundle/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub kind: DetectorKind,
    pub size: usize,
    pub temperature: Option<f64>,
    pub weights: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub samples_per_prediction: usize,
    pub members: Vec<String>,
    #[serde(default)]
    pub config_digest: Option<String>,
}

/// Write `manifest.json` plus one checkpoint per member into `dir`.
pub fn save_bundle(det: &CalibratedDetector, dir: &Path, config_digest: Option<&str>) -> Result<()> {
    let mut names = Vec::with_capacity(det.members.len());
    for (i, m) in det.members.iter().enumerate() {
        let name = format!("member_{i}.json");
        nn::save_checkpoint(m, &dir.join(&name))?;
        names.push(name);
    }
    let manifest = BundleManifest {
        format: BUNDLE_FORMAT.into(),
        kind: det.kind,
        size: det.members.len(),
        temperature: det.temperature,
        weights: det.weights.clone(),
        seeds: det.members.iter().map(|m| m.seed).collect(),
        samples_per_prediction: det.samples_per_prediction,
        members: names,
        config_digest: config_digest.map(str::to_string),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    util::write_atomic(&dir.join("manifest.json"), text.as_bytes())
}

pub fn load_bundle(dir: &Path) -> Result<CalibratedDetector> {
    let det = load_bundle_unchecked(dir)?;
    det.validate()?;
    Ok(det)
}

/// Load a bundle that may not have been post-processed yet.
pub fn load_bundle_unchecked(dir: &Path) -> Result<CalibratedDetector> {
    let path: PathBuf = dir.join("manifest.json");
    let manifest: BundleManifest = serde_json::from_str(&util::read_to_string(&path)?)?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::Serde(format!(
            "{}: unsupported bundle format `{}`",
            path.display(),
            manifest.format
        )));
    }
    let members = manifest
        .members
        .iter()
        .map(|name| nn::load_checkpoint(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    if members.len() != manifest.size {
        return Err(Error::Config("bundle size disagrees with member list".into()));
    }
    Ok(CalibratedDetector {
        kind: manifest.kind,
        members,
        temperature: manifest.temperature,
        weights: manifest.weights,
        samples_per_prediction: manifest.samples_per_prediction,
    })
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// `id,label,mean,member_probs,weights` rows; lists are `;`-separated.
pub fn predictions_to_csv(ds: &LabeledDataset, samples: &[PredictiveSample]) -> String {
    let mut out = String::from("id,label,mean,member_probs,weights\n");
    for (ex, s) in ds.examples.iter().zip(samples) {
        let label = ex.label.map_or("?".to_string(), |l| l.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            ex.id,
            label,
            s.mean(),
            join(s.member_probs()),
            join(s.weights())
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decide_threshold_inclusive() {
        assert_eq!(decide(&PredictiveSample::single(0.5)), 1);
        assert_eq!(decide(&PredictiveSample::single(0.4999999)), 0);
    }

    #[test]
    fn sample_validation() {
        assert!(PredictiveSample::new(vec![], vec![]).is_err());
        assert!(PredictiveSample::new(vec![0.2, 0.3], vec![0.5, 0.6]).is_err());
        assert!(PredictiveSample::new(vec![1.2], vec![1.0]).is_err());
        assert!(PredictiveSample::new(vec![0.2, 0.3], vec![1.0, 0.0]).is_ok());
    }

    #[test]
    fn degenerate_validation_rejected() {
        assert!(matches!(
            fit_temperature(&[1.0, 2.0], &[1, 1]),
            Err(Error::DegenerateValidation(_))
        ));
    }

    #[test]
    fn weights_trivial_cases() {
        assert_eq!(fit_weights_from_probs(&[vec![0.3, 0.9]], &[0, 1]).unwrap(), vec![1.0]);
        let p = vec![0.3, 0.9, 0.6];
        let w = fit_weights_from_probs(&[p.clone(), p], &[0, 1, 1]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        assert!(fit_weights_from_probs(&[vec![], vec![]], &[]).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in DetectorKind::ALL {
            assert_eq!(DetectorKind::parse(k.as_str()), Some(k));
        }
    }

    #[test]
    fn validate_rejects_inconsistent_fields() {
        let m = ModelParams::mlp(2, &[3], LayerKind::Dense, None, 1).unwrap();
        let mut det = CalibratedDetector {
            kind: DetectorKind::Vanilla,
            members: vec![m],
            temperature: Some(2.0),
            weights: None,
            samples_per_prediction: 10,
        };
        assert!(det.validate().is_err());
        det.temperature = None;
        assert!(det.validate().is_ok());
        det.kind = DetectorKind::TempScaling;
        assert!(det.validate().is_err());
    }
}
