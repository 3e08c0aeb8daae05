//! `detcal` command-line interface.
//!
//! Every subcommand is a thin wrapper over one library operation. `--seed`,
//! `--config` and `--out` are accepted everywhere; `--seed` and `--out`
//! override the corresponding config keys. Failures print one line,
//! `error: <kind>: <message>`, and exit with status 1. Usage errors exit 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use detcal::calib::{self, DetectorKind};
use detcal::config::ExperimentConfig;
use detcal::data::{self, save_dataset};
use detcal::metrics::BinMode;
use detcal::pipeline::{self, seeds, EvalSet};
use detcal::rng::derive_seed;
use detcal::shift::{self, AttackKind};
use detcal::{write_atomic, Result};

#[derive(Parser)]
#[command(name = "detcal", version, about = "Calibrated malware-detector analogs under dataset shift")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory or file (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test splits and configured shifted test sets.
    Gen,
    /// Train the members of one detector and save them as a bundle.
    Train {
        /// vanilla, temp-scaling, mc-dropout, vbi, ensemble or w-ensemble.
        #[arg(long, value_parser = parse_kind)]
        detector: DetectorKind,
        /// Training split; generated from the config when omitted.
        #[arg(long, requires = "val")]
        train: Option<PathBuf>,
        #[arg(long, requires = "train")]
        val: Option<PathBuf>,
    },
    /// Fit the post-hoc temperature or vote weights of a trained bundle.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        val: PathBuf,
    },
    /// Metric report, bins, reliability, referral and predictions for one set.
    Evaluate {
        /// Detector bundle directory.
        #[arg(long)]
        model: PathBuf,
        /// Labelled dataset file.
        #[arg(long)]
        data: PathBuf,
        /// Calibration bins (overrides the config).
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long, value_parser = parse_bin_mode)]
        bin_mode: Option<BinMode>,
    },
    /// Entropy-threshold referral curve for one set.
    Refer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Thresholds in the grid from 0 to ln 2.
        #[arg(long)]
        tau_points: Option<usize>,
    },
    /// Attack the malicious examples of a dataset against a surrogate bundle.
    Attack {
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_attack)]
        kind: AttackKind,
        /// Maximum number of added features.
        #[arg(long)]
        budget: Option<usize>,
        /// Benign examples used as mimicry templates.
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Run the whole configured experiment and write the report bundle.
    Report,
}

fn parse_kind(s: &str) -> std::result::Result<DetectorKind, String> {
    DetectorKind::parse(s).ok_or_else(|| {
        let names: Vec<_> = DetectorKind::ALL.iter().map(|k| k.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_attack(s: &str) -> std::result::Result<AttackKind, String> {
    AttackKind::parse(s).ok_or_else(|| "expected one of greedy, mimicry, max".to_string())
}

fn parse_bin_mode(s: &str) -> std::result::Result<BinMode, String> {
    match s {
        "equal-width" => Ok(BinMode::EqualWidth),
        "quantile" => Ok(BinMode::Quantile),
        _ => Err("expected equal-width or quantile".into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::from(1)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_file(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Gen => {
            let ds = pipeline::build_datasets(&cfg)?;
            let dir = &cfg.out_dir;
            save_dataset(&ds.splits.train, &dir.join("train.csv"))?;
            save_dataset(&ds.splits.val, &dir.join("val.csv"))?;
            save_dataset(&ds.splits.test, &dir.join("test.csv"))?;
            for EvalSet { name, data } in &ds.shifted {
                save_dataset(data, &dir.join(format!("{name}.csv")))?;
            }
            if let Some(g) = &ds.generator {
                let text = serde_json::to_string_pretty(g)?;
                write_atomic(&dir.join("generator.json"), text.as_bytes())?;
            }
        }
        Command::Train {
            detector,
            train,
            val,
        } => {
            let (train, val) = match (train, val) {
                (Some(t), Some(v)) => (data::load_dataset(&t)?, data::load_dataset(&v)?),
                _ => {
                    let s = pipeline::build_datasets(&cfg)?.splits;
                    (s.train, s.val)
                }
            };
            let tc = cfg.train_config(derive_seed(cfg.seed, seeds::TRAIN));
            let det = calib::train_members(&cfg.detector_spec(detector), &train, &val, &tc)
                .map_err(|e| e.at_stage("train"))?;
            calib::save_bundle(&det, &cfg.out_dir, Some(&cfg.digest()))?;
        }
        Command::Calibrate { model, val } => {
            let det = calib::load_bundle_unchecked(&model)?;
            let det = calib::calibrate(det, &data::load_dataset(&val)?)
                .map_err(|e| e.at_stage("calibrate"))?;
            let out = cli.common.out.clone().unwrap_or(model);
            calib::save_bundle(&det, &out, Some(&cfg.digest()))?;
        }
        Command::Evaluate {
            model,
            data: path,
            bins,
            bin_mode,
        } => {
            let mut cfg = cfg;
            if let Some(b) = bins {
                cfg.bins = b;
            }
            if let Some(m) = bin_mode {
                cfg.bin_mode = m;
            }
            let det = calib::load_bundle(&model)?;
            let set = named_set(&path)?;
            let r = pipeline::evaluate_set(&cfg, &det, &set, derive_seed(cfg.seed, seeds::PREDICT))?;
            pipeline::write_set_report(&cfg, &cfg.out_dir, &r, &set.data)?;
        }
        Command::Refer {
            model,
            data: path,
            tau_points,
        } => {
            let mut cfg = cfg;
            if let Some(t) = tau_points {
                cfg.tau_points = t;
            }
            let det = calib::load_bundle(&model)?;
            let set = named_set(&path)?;
            let samples = det.predict_dataset(&set.data, derive_seed(cfg.seed, seeds::PREDICT))?;
            let curve = detcal::evalkit::referral_curve(
                &samples,
                &set.data.labels()?,
                &detcal::evalkit::default_tau_grid(cfg.tau_points),
            )?;
            let text = format!("{}{}", pipeline::artifact_header(&cfg), curve.to_csv_rows());
            write_atomic(&out_file(&cli.common, "referral.csv"), text.as_bytes())?;
        }
        Command::Attack {
            surrogate,
            data: path,
            kind,
            budget,
            pool,
        } => {
            let det = calib::load_bundle(&surrogate)?;
            let ds = data::load_dataset(&path)?;
            let pool = match pool {
                Some(p) => data::load_dataset(&p)?.filter_label(0),
                None => ds.filter_label(0),
            };
            let attacked = shift::attack_dataset(
                &ds,
                kind,
                budget.unwrap_or(cfg.attack_budget),
                &det,
                &pool,
                derive_seed(cfg.seed, seeds::ATTACK),
            )
            .map_err(|e| e.at_stage("attack"))?;
            save_dataset(&attacked, &out_file(&cli.common, "attacked.csv"))?;
        }
        Command::Report => {
            pipeline::run_experiment(&cfg)?;
        }
    }
    Ok(())
}

fn named_set(path: &Path) -> Result<EvalSet> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    Ok(EvalSet {
        name,
        data: data::load_dataset(path)?,
    })
}
