//! End-to-end experiment runner: data, training, post-processing,
//! evaluation on every requested test set, and the report bundle on disk.
//!
//! Layout of `out_dir`:
//!
//! ```text
//! manifest.toml                    seeds, digest, versions, artifact list
//! summary.csv                      detector,set,metric,value for every set
//! attack_summary.csv               clean vs attacked metrics (when attacks run)
//! <detector>/<set>/metrics.csv     the eleven-entry metric table
//! <detector>/<set>/uncertainty.csv mean entropy / SD / KL
//! <detector>/<set>/bins.csv        calibration bin table
//! <detector>/<set>/reliability.csv reliability diagram rows
//! <detector>/<set>/referral.csv    entropy-threshold referral curve
//! <detector>/<set>/entropy_hist.csv
//! <detector>/<set>/ci.csv          bootstrap intervals for Acc / bAcc
//! <detector>/<set>/predictions.csv
//! <detector>/<set>/*.svg           when `svg = true`
//! ```
//!
//! Every CSV starts with `# config_digest=…` and `# seed=…` lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::calib::{self, decide, CalibratedDetector, DetectorKind, PredictiveSample};
use crate::config::ExperimentConfig;
use crate::data::{self, split_dataset, LabeledDataset, Splits};
use crate::error::{Error, Result};
use crate::evalkit::{self, BootstrapData, Statistic};
use crate::metrics::{self, MetricReport};
use crate::rng::derive_seed;
use crate::shift::{self, DriftConfig, GeneratorConfig};
use crate::util::{self, fmt_opt};

/// Seed roles derived from the master seed.
pub mod seeds {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const OUT_OF_SOURCE: u64 = 4;
    pub const SURROGATE: u64 = 5;
    pub const TEMPORAL: u64 = 6;
    pub const ATTACK: u64 = 7;
    pub const BOOTSTRAP: u64 = 8;
    pub const PREDICT: u64 = 0x100;
}

#[derive(Debug, Clone)]
pub struct EvalSet {
    pub name: String,
    pub data: LabeledDataset,
}

#[derive(Debug, Clone)]
pub struct SetResult {
    pub detector: DetectorKind,
    pub set: String,
    pub report: MetricReport,
    pub mean_entropy: f64,
    pub mean_sd: Option<f64>,
    pub mean_kl: f64,
    pub referral: evalkit::ReferralCurve,
    pub samples: Vec<PredictiveSample>,
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub config_digest: String,
    pub seed: u64,
    pub results: Vec<SetResult>,
    /// Paths relative to the output directory, in write order.
    pub artifacts: Vec<PathBuf>,
}

impl ReportBundle {
    pub fn result(&self, detector: DetectorKind, set: &str) -> Option<&SetResult> {
        self.results
            .iter()
            .find(|r| r.detector == detector && r.set == set)
    }
}

/// `# config_digest=…` / `# seed=…` lines that open every CSV.
pub fn artifact_header(cfg: &ExperimentConfig) -> String {
    format!("# config_digest={}\n# seed={}\n", cfg.digest(), cfg.seed)
}

struct Writer<'a> {
    root: &'a Path,
    header: String,
    artifacts: Vec<PathBuf>,
}

impl Writer<'_> {
    fn csv(&mut self, rel: impl AsRef<Path>, body: &str) -> Result<()> {
        let text = format!("{}{body}", self.header);
        self.raw(rel, &text)
    }

    fn raw(&mut self, rel: impl AsRef<Path>, text: &str) -> Result<()> {
        let rel = rel.as_ref().to_path_buf();
        util::write_atomic(&self.root.join(&rel), text.as_bytes())?;
        self.artifacts.push(rel);
        Ok(())
    }
}

/// In-distribution source data and, when synthetic, its generator.
pub fn source_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset, Option<GeneratorConfig>)> {
    match &cfg.data_path {
        Some(p) => Ok((data::load_dataset(p)?, None)),
        None => {
            let mut gen = GeneratorConfig::synthesize(&cfg.synth_spec())?;
            if cfg.temporal_months > 0 {
                gen.drift = Some(DriftConfig {
                    rate_per_step: cfg.drift_rate,
                    horizon: cfg.drift_horizon,
                });
            }
            if cfg.out_of_source > 0.0 {
                gen.source_shift = Some(cfg.out_of_source);
            }
            let ds = shift::gen_dataset(&gen, cfg.n_examples, derive_seed(cfg.seed, seeds::DATA))?;
            Ok((ds, Some(gen)))
        }
    }
}

/// Splits of the source data plus the configured shifted test sets
/// (out-of-source, temporal); adversarial sets need a trained surrogate and
/// are built by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct Datasets {
    pub splits: Splits,
    pub generator: Option<GeneratorConfig>,
    pub shifted: Vec<EvalSet>,
}

pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let seed = cfg.seed;
    let (source, gen) = source_data(cfg).map_err(|e| e.at_stage("data"))?;
    let splits = split_dataset(&source, cfg.splits(), derive_seed(seed, seeds::SPLIT))
        .map_err(|e| e.at_stage("split"))?;
    let mut shifted = Vec::new();
    if let Some(gen) = &gen {
        if cfg.out_of_source > 0.0 {
            let ds = shift::gen_out_of_source(
                gen,
                cfg.out_of_source,
                splits.test.len().max(1),
                derive_seed(seed, seeds::OUT_OF_SOURCE),
            )
            .map_err(|e| e.at_stage("out-of-source"))?;
            shifted.push(EvalSet {
                name: "out_of_source".into(),
                data: ds,
            });
        }
        if cfg.temporal_months > 0 {
            let months = shift::gen_temporal(
                gen,
                cfg.temporal_months + 1,
                cfg.n_per_month,
                derive_seed(seed, seeds::TEMPORAL),
            )
            .map_err(|e| e.at_stage("temporal"))?;
            for (t, ds) in months.into_iter().enumerate() {
                shifted.push(EvalSet {
                    name: format!("month_{t:02}"),
                    data: ds,
                });
            }
        }
    }
    Ok(Datasets {
        splits,
        generator: gen,
        shifted,
    })
}

/// Train every configured detector, evaluate on each configured test set
/// and write the report bundle to `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ReportBundle> {
    cfg.validate().map_err(|e| e.at_stage("config"))?;
    let digest = cfg.digest();
    let seed = cfg.seed;

    let Datasets { splits, shifted, .. } = build_datasets(cfg)?;
    let mut sets = vec![EvalSet {
        name: "in_distribution".into(),
        data: splits.test.clone(),
    }];
    sets.extend(shifted);

    let mut attack_sets: Vec<String> = Vec::new();
    if !cfg.attacks.is_empty() {
        let surrogate_spec = cfg.detector_spec(DetectorKind::Vanilla);
        let surrogate = calib::train_detector(
            &surrogate_spec,
            &splits.train,
            &splits.val,
            &cfg.train_config(derive_seed(seed, seeds::SURROGATE)),
        )
        .map_err(|e| e.at_stage("surrogate"))?;
        let malware = splits.test.filter_label(1);
        let take: Vec<usize> = (0..malware.len().min(cfg.attack_examples)).collect();
        let clean = malware.subset(&take);
        let pool = splits.train.filter_label(0);
        sets.push(EvalSet {
            name: "no_attack".into(),
            data: clean.clone(),
        });
        attack_sets.push("no_attack".into());
        for kind in &cfg.attacks {
            let attacked = shift::attack_dataset(
                &clean,
                *kind,
                cfg.attack_budget,
                &surrogate,
                &pool,
                derive_seed(seed, seeds::ATTACK),
            )
            .map_err(|e| e.at_stage("attack"))?;
            let name = format!("attack_{}", kind.as_str());
            attack_sets.push(name.clone());
            sets.push(EvalSet {
                name,
                data: attacked,
            });
        }
    }

    let root = cfg.out_dir.as_path();
    let mut w = Writer {
        root,
        header: artifact_header(cfg),
        artifacts: Vec::new(),
    };
    let train_seed = derive_seed(seed, seeds::TRAIN);
    let mut results = Vec::new();
    for &kind in &cfg.detectors {
        let det = calib::train_detector(
            &cfg.detector_spec(kind),
            &splits.train,
            &splits.val,
            &cfg.train_config(train_seed),
        )
        .map_err(|e| e.at_stage("train"))?;
        if cfg.save_models {
            calib::save_bundle(&det, &root.join(kind.as_str()).join("model"), Some(&digest))
                .map_err(|e| e.at_stage("save-model"))?;
        }
        for (si, set) in sets.iter().enumerate() {
            let r = evaluate_set(cfg, &det, set, derive_seed(seed, seeds::PREDICT + si as u64))
                .map_err(|e| e.at_stage("evaluate"))?;
            write_set(cfg, &mut w, &r, &set.data)?;
            results.push(r);
        }
    }

    let mut summary = String::from("detector,set,metric,value\n");
    for r in &results {
        for (name, v) in r.report.entries() {
            let _ = writeln!(summary, "{},{},{name},{}", r.detector, r.set, fmt_opt(v));
        }
        let _ = writeln!(summary, "{},{},mean_entropy,{}", r.detector, r.set, r.mean_entropy);
    }
    w.csv("summary.csv", &summary)?;

    if !attack_sets.is_empty() {
        let mut t = String::from("detector,metric");
        for s in &attack_sets {
            let _ = write!(t, ",{s}");
        }
        t.push('\n');
        for &kind in &cfg.detectors {
            let rows: Vec<&SetResult> = attack_sets
                .iter()
                .filter_map(|s| results.iter().find(|r| r.detector == kind && &r.set == s))
                .collect();
            for name in ["Acc", "NLL", "BSE", "ECE"] {
                let _ = write!(t, "{kind},{name}");
                for r in &rows {
                    let _ = write!(t, ",{}", fmt_opt(r.report.get(name)));
                }
                t.push('\n');
            }
            let _ = write!(t, "{kind},mean_entropy");
            for r in &rows {
                let _ = write!(t, ",{}", r.mean_entropy);
            }
            t.push('\n');
        }
        w.csv("attack_summary.csv", &t)?;
    }

    let mut manifest = BTreeMap::new();
    manifest.insert("config_digest", toml::Value::String(digest.clone()));
    manifest.insert("seed", toml::Value::String(seed.to_string()));
    let mut derived = toml::map::Map::new();
    for (name, role) in [
        ("data", seeds::DATA),
        ("split", seeds::SPLIT),
        ("train", seeds::TRAIN),
        ("out_of_source", seeds::OUT_OF_SOURCE),
        ("surrogate", seeds::SURROGATE),
        ("temporal", seeds::TEMPORAL),
        ("attack", seeds::ATTACK),
        ("bootstrap", seeds::BOOTSTRAP),
    ] {
        derived.insert(name.into(), toml::Value::String(derive_seed(seed, role).to_string()));
    }
    manifest.insert("derived_seeds", toml::Value::Table(derived));
    manifest.insert(
        "version",
        toml::Value::String(env!("CARGO_PKG_VERSION").to_string()),
    );
    manifest.insert(
        "sets",
        toml::Value::Array(sets.iter().map(|s| toml::Value::String(s.name.clone())).collect()),
    );
    let mut artifacts = w.artifacts.clone();
    artifacts.push(PathBuf::from("manifest.toml"));
    manifest.insert(
        "artifacts",
        toml::Value::Array(
            artifacts
                .iter()
                .map(|p| toml::Value::String(p.to_string_lossy().replace('\\', "/")))
                .collect(),
        ),
    );
    let mut text = toml::to_string(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    text.push_str("\n[config]\n");
    text.push_str(&cfg_without_out_dir(cfg));
    w.raw("manifest.toml", &text)?;

    Ok(ReportBundle {
        config_digest: digest,
        seed,
        results,
        artifacts,
    })
}

fn cfg_without_out_dir(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.out_dir = PathBuf::new();
    c.to_toml_string()
        .lines()
        .filter(|l| !l.starts_with("out_dir"))
        .map(|l| format!("{l}\n"))
        .collect()
}

/// Predict and score one set.
pub fn evaluate_set(
    cfg: &ExperimentConfig,
    det: &CalibratedDetector,
    set: &EvalSet,
    predict_seed: u64,
) -> Result<SetResult> {
    let samples = det.predict_dataset(&set.data, predict_seed)?;
    let truth = set.data.labels()?;
    let probs: Vec<f64> = samples.iter().map(PredictiveSample::mean).collect();
    let report = MetricReport::compute(&probs, &truth, cfg.bins, cfg.bin_mode)?;
    let n = samples.len().max(1) as f64;
    let mean_entropy = samples.iter().map(metrics::entropy).sum::<f64>() / n;
    let mean_sd = samples
        .iter()
        .map(metrics::sd)
        .collect::<Result<Vec<_>>>()
        .ok()
        .map(|v| v.iter().sum::<f64>() / n);
    let mean_kl = samples.iter().map(metrics::kl_disagreement).sum::<f64>() / n;
    let referral = evalkit::referral_curve(
        &samples,
        &truth,
        &evalkit::default_tau_grid(cfg.tau_points),
    )?;
    Ok(SetResult {
        detector: det.kind,
        set: set.name.clone(),
        report,
        mean_entropy,
        mean_sd,
        mean_kl,
        referral,
        samples,
    })
}

/// Write the per-set artifacts of `r` into `dir`; returns the written paths.
pub fn write_set_report(
    cfg: &ExperimentConfig,
    dir: &Path,
    r: &SetResult,
    ds: &LabeledDataset,
) -> Result<Vec<PathBuf>> {
    let mut w = Writer {
        root: dir,
        header: artifact_header(cfg),
        artifacts: Vec::new(),
    };
    write_set_into(cfg, &mut w, PathBuf::new(), r, ds)?;
    Ok(w.artifacts.into_iter().map(|p| dir.join(p)).collect())
}

fn write_set(cfg: &ExperimentConfig, w: &mut Writer<'_>, r: &SetResult, ds: &LabeledDataset) -> Result<()> {
    let dir = PathBuf::from(r.detector.as_str()).join(&r.set);
    write_set_into(cfg, w, dir, r, ds)
}

fn write_set_into(
    cfg: &ExperimentConfig,
    w: &mut Writer<'_>,
    dir: PathBuf,
    r: &SetResult,
    ds: &LabeledDataset,
) -> Result<()> {
    let truth = ds.labels()?;
    let probs: Vec<f64> = r.samples.iter().map(PredictiveSample::mean).collect();
    w.csv(dir.join("metrics.csv"), &r.report.to_csv_rows())?;
    w.csv(
        dir.join("uncertainty.csv"),
        &format!(
            "metric,value\nmean_entropy,{}\nmean_sd,{}\nmean_kl,{}\n",
            r.mean_entropy,
            fmt_opt(r.mean_sd),
            r.mean_kl
        ),
    )?;
    let bins = metrics::bin_stats(&probs, &truth, cfg.bins, cfg.bin_mode)?;
    w.csv(dir.join("bins.csv"), &metrics::bins_to_csv_rows(&bins))?;
    let rel = evalkit::reliability_data(&bins);
    w.csv(dir.join("reliability.csv"), &evalkit::reliability_to_csv_rows(&rel))?;
    w.csv(dir.join("referral.csv"), &r.referral.to_csv_rows())?;
    let hist = evalkit::entropy_histogram(&r.samples, cfg.histogram_bins)?;
    w.csv(dir.join("entropy_hist.csv"), &evalkit::histogram_to_csv_rows(&hist))?;
    let pairs: Vec<(u8, u8)> = r.samples.iter().map(decide).zip(truth.iter().copied()).collect();
    let boot_seed = derive_seed(cfg.seed, seeds::BOOTSTRAP);
    let mut cis = Vec::new();
    for stat in [Statistic::Acc, Statistic::BAcc] {
        if let Ok(ci) = evalkit::bootstrap_ci(
            BootstrapData::Pairs(&pairs),
            stat,
            cfg.bootstrap_reps,
            cfg.bootstrap_level,
            boot_seed,
        ) {
            cis.push((stat.as_str(), ci));
        }
    }
    w.csv(dir.join("ci.csv"), &evalkit::ci_to_csv_rows(&cis))?;
    w.csv(dir.join("predictions.csv"), &calib::predictions_to_csv(ds, &r.samples))?;
    if cfg.svg {
        let title = format!("{} / {}", r.detector, r.set);
        w.raw(dir.join("reliability.svg"), &evalkit::reliability_svg(&rel, &title))?;
        w.raw(dir.join("referral.svg"), &evalkit::referral_svg(&r.referral, &title))?;
    }
    Ok(())
}
