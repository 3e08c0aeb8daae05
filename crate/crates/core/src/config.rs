//! Experiment configuration: one TOML file with flat keys.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `data_path` | – | load this dataset file instead of generating one |
//! | `dimension`, `mode`, `class_prior`, `informative`, `separation`, `label_noise`, `profile_seed` | 1024, `binary-drebin-like`, 0.5, 40, 0.35, 0, 17 | synthetic generator |
//! | `n_examples` | 3000 | generated dataset size |
//! | `train_fraction`, `val_fraction`, `test_fraction` | 0.6, 0.2, 0.2 | split |
//! | `detectors` | `["vanilla"]` | detector kinds to train and evaluate |
//! | `hidden`, `dropout_rate`, `ensemble_size`, `samples_per_prediction` | `[32, 32]`, 0.4, 10, 10 | architecture |
//! | `learning_rate`, `epochs`, `batch_size`, `kl_weight`, `gradient_clip` | 0.001, 30, 16, 1.0, – | training |
//! | `seed` | 0 | master seed |
//! | `bins`, `bin_mode` | 10, `equal-width` | calibration bins |
//! | `tau_points`, `histogram_bins` | 50, 20 | referral grid, entropy histogram |
//! | `bootstrap_reps`, `bootstrap_level` | 1000, 0.95 | percentile bootstrap |
//! | `out_of_source` | 0 | shift magnitude of the out-of-source test set (0 = off) |
//! | `temporal_months`, `drift_rate`, `drift_horizon`, `n_per_month` | 0, 0.05, 12, 500 | temporal test sets `0..=temporal_months` |
//! | `attacks`, `attack_budget`, `attack_examples` | `[]`, 20, 100 | transfer attacks on test malware |
//! | `svg`, `save_models` | true, false | optional outputs |
//! | `out_dir` | `out` | output directory (not part of the digest) |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{DetectorKind, DetectorSpec};
use crate::data::{FeatureMode, SplitFractions};
use crate::error::{Error, Result};
use crate::metrics::BinMode;
use crate::nn::TrainConfig;
use crate::shift::{AttackKind, SynthSpec};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_path: Option<PathBuf>,
    pub dimension: usize,
    pub mode: FeatureMode,
    pub class_prior: f64,
    pub informative: usize,
    pub separation: f64,
    pub label_noise: f64,
    pub profile_seed: u64,
    pub n_examples: usize,

    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,

    pub detectors: Vec<DetectorKind>,
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub ensemble_size: usize,
    pub samples_per_prediction: usize,

    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub kl_weight: f64,
    pub gradient_clip: Option<f64>,
    pub seed: u64,

    pub bins: usize,
    pub bin_mode: BinMode,
    pub tau_points: usize,
    pub histogram_bins: usize,
    pub bootstrap_reps: usize,
    pub bootstrap_level: f64,

    pub out_of_source: f64,
    pub temporal_months: usize,
    pub drift_rate: f64,
    pub drift_horizon: usize,
    pub n_per_month: usize,

    pub attacks: Vec<AttackKind>,
    pub attack_budget: usize,
    pub attack_examples: usize,

    pub svg: bool,
    pub save_models: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let det = DetectorSpec::default();
        let train = TrainConfig::default();
        Self {
            data_path: None,
            dimension: synth.dimension,
            mode: synth.mode,
            class_prior: synth.class_prior,
            informative: synth.informative,
            separation: synth.separation,
            label_noise: synth.label_noise,
            profile_seed: synth.profile_seed,
            n_examples: 3000,
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.2,
            detectors: vec![DetectorKind::Vanilla],
            hidden: det.hidden,
            dropout_rate: det.dropout_rate,
            ensemble_size: det.ensemble_size,
            samples_per_prediction: det.samples_per_prediction,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
            kl_weight: train.kl_weight,
            gradient_clip: train.gradient_clip,
            seed: 0,
            bins: 10,
            bin_mode: BinMode::EqualWidth,
            tau_points: crate::evalkit::DEFAULT_TAU_POINTS,
            histogram_bins: 20,
            bootstrap_reps: 1000,
            bootstrap_level: 0.95,
            out_of_source: 0.0,
            temporal_months: 0,
            drift_rate: 0.05,
            drift_horizon: 12,
            n_per_month: 500,
            attacks: Vec::new(),
            attack_budget: 20,
            attack_examples: 100,
            svg: true,
            save_models: false,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&util::read_to_string(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment config serialises")
    }

    /// Hex SHA-256 of the canonical TOML form with `out_dir` blanked.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml_string().as_bytes()))
    }

    pub fn splits(&self) -> SplitFractions {
        SplitFractions {
            train: self.train_fraction,
            val: self.val_fraction,
            test: self.test_fraction,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            dimension: self.dimension,
            mode: self.mode,
            class_prior: self.class_prior,
            informative: self.informative,
            separation: self.separation,
            label_noise: self.label_noise,
            profile_seed: self.profile_seed,
        }
    }

    pub fn detector_spec(&self, kind: DetectorKind) -> DetectorSpec {
        DetectorSpec {
            kind,
            hidden: self.hidden.clone(),
            dropout_rate: self.dropout_rate,
            ensemble_size: self.ensemble_size,
            samples_per_prediction: self.samples_per_prediction,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            kl_weight: self.kl_weight,
            gradient_clip: self.gradient_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.splits().validate()?;
        if self.detectors.is_empty() {
            return Err(Error::Config("at least one detector kind is required".into()));
        }
        if self.bins == 0 || self.histogram_bins == 0 || self.tau_points == 0 {
            return Err(Error::Config("bins, histogram_bins and tau_points must be positive".into()));
        }
        if self.bootstrap_reps == 0 || !(self.bootstrap_level > 0.0 && self.bootstrap_level < 1.0) {
            return Err(Error::Config("invalid bootstrap options".into()));
        }
        if let Some(p) = &self.data_path {
            if !p.exists() {
                return Err(Error::Config(format!("data_path {} does not exist", p.display())));
            }
            if self.out_of_source > 0.0 || self.temporal_months > 0 {
                return Err(Error::Config(
                    "shifted test sets need the synthetic generator, not data_path".into(),
                ));
            }
        }
        if self.data_path.is_none() && self.n_examples == 0 {
            return Err(Error::Config("n_examples must be positive".into()));
        }
        if !self.attacks.is_empty() && self.mode != FeatureMode::BinaryDrebinLike {
            return Err(Error::Config("attacks need binary-drebin-like features".into()));
        }
        self.train_config(self.seed).validate()?;
        Ok(())
    }
}
