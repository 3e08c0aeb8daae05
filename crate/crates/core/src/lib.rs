//! Calibrated binary detectors and the machinery to judge their predictive
//! uncertainty.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] – a small feed-forward engine (dense, dropout and Bayesian-dense
//!   layers) trained with Adam on binary cross-entropy.
//! * [`calib`] – six calibration strategies behind one predictive interface.
//! * [`metrics`] – detection metrics and the uncertainty metrics, including the
//!   class-balanced and unweighted variants.
//! * [`evalkit`] – decision referral, reliability tables, entropy histograms and
//!   percentile bootstrap intervals.
//! * [`shift`] – synthetic data with out-of-source and temporal shift, plus
//!   feature-space evasion attacks.
//! * [`data`], [`config`], [`pipeline`] – file formats, experiment
//!   configuration and the end-to-end runner used by the CLI.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod calib;
pub mod config;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod shift;
pub(crate) mod util;

pub use calib::{CalibratedDetector, DetectorKind, PredictiveSample};
pub use data::{Example, FeatureMode, LabeledDataset};
pub use error::{Error, Result};
pub use util::write_atomic;
pub use metrics::MetricReport;
pub use nn::{ModelParams, TrainConfig};
