//! Decision referral, entropy histograms, reliability tables and percentile
//! bootstrap intervals, with CSV and SVG emitters for each.

use std::f64::consts::LN_2;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{decide, PredictiveSample};
use crate::error::{Error, Result};
use crate::metrics::{detection_metrics, entropy, BinStats};
use crate::rng::substream;
use crate::util::fmt_opt;

/// `points` evenly spaced thresholds on `[0, ln 2]`; the last is exactly `ln 2`.
pub fn default_tau_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![LN_2],
        _ => (0..points)
            .map(|i| {
                if i + 1 == points {
                    LN_2
                } else {
                    LN_2 * i as f64 / (points - 1) as f64
                }
            })
            .collect(),
    }
}

pub const DEFAULT_TAU_POINTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferralPoint {
    pub tau: f64,
    pub retained: usize,
    pub coverage: f64,
    pub acc: Option<f64>,
    pub bacc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferralCurve {
    pub total: usize,
    pub points: Vec<ReferralPoint>,
}

impl ReferralCurve {
    pub fn at(&self, tau: f64) -> Option<&ReferralPoint> {
        self.points.iter().find(|p| p.tau == tau)
    }

    pub fn to_csv_rows(&self) -> String {
        let mut out = String::from("tau,retained,coverage,acc,bacc\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                p.tau,
                p.retained,
                p.coverage,
                fmt_opt(p.acc),
                fmt_opt(p.bacc)
            );
        }
        out
    }
}

/// Keep examples whose predictive entropy is at most `tau` and score the
/// retained set at every threshold. Undefined scores stay `None`.
pub fn referral_curve(
    samples: &[PredictiveSample],
    truth: &[u8],
    taus: &[f64],
) -> Result<ReferralCurve> {
    if samples.len() != truth.len() {
        return Err(Error::Config("samples and labels differ in length".into()));
    }
    if taus.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("referral thresholds must be strictly increasing".into()));
    }
    let ent: Vec<f64> = samples.iter().map(entropy).collect();
    let preds: Vec<u8> = samples.iter().map(decide).collect();
    let total = samples.len();
    let points = taus
        .iter()
        .map(|&tau| {
            let (kp, kt): (Vec<u8>, Vec<u8>) = ent
                .iter()
                .zip(preds.iter().zip(truth))
                .filter(|(e, _)| **e <= tau)
                .map(|(_, (p, t))| (*p, *t))
                .unzip();
            let retained = kp.len();
            let (acc, bacc) = match detection_metrics(&kp, &kt) {
                Ok(m) => (Some(m.acc), m.bacc),
                Err(_) => (None, None),
            };
            ReferralPoint {
                tau,
                retained,
                coverage: if total == 0 { 0.0 } else { retained as f64 / total as f64 },
                acc,
                bacc,
            }
        })
        .collect();
    Ok(ReferralCurve { total, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `count / (N · width)`; integrates to one over `[0, ln 2]`.
    pub density: f64,
}

/// Equal-width histogram of predictive entropy over `[0, ln 2]`.
pub fn entropy_histogram(samples: &[PredictiveSample], bins: usize) -> Result<Vec<HistogramBin>> {
    let ent: Vec<f64> = samples.iter().map(entropy).collect();
    histogram_of_entropies(&ent, bins)
}

pub fn histogram_of_entropies(entropies: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let width = LN_2 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &e in entropies {
        let k = ((e / width).floor().max(0.0) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = entropies.len().max(1) as f64;
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            lower: k as f64 * width,
            upper: if k + 1 == bins { LN_2 } else { (k + 1) as f64 * width },
            count,
            density: count as f64 / (n * width),
        })
        .collect())
}

pub fn histogram_to_csv_rows(hist: &[HistogramBin]) -> String {
    let mut out = String::from("lower,upper,count,density\n");
    for b in hist {
        let _ = writeln!(out, "{},{},{},{}", b.lower, b.upper, b.count, b.density);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub conf: f64,
    pub frac_pos: f64,
    pub count: usize,
}

/// Reliability diagram data: one row per occupied bin. The reference
/// diagonal is `frac_pos = conf`.
pub fn reliability_data(bins: &[BinStats]) -> Vec<ReliabilityRow> {
    bins.iter()
        .filter_map(|b| {
            Some(ReliabilityRow {
                conf: b.conf?,
                frac_pos: b.frac_pos?,
                count: b.count,
            })
        })
        .collect()
}

pub fn reliability_to_csv_rows(rows: &[ReliabilityRow]) -> String {
    let mut out = String::from("conf,frac_pos,count,diagonal\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.conf, r.frac_pos, r.count, r.conf);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    Acc,
    BAcc,
    Mean,
}

impl Statistic {
    pub fn as_str(self) -> &'static str {
        match self {
            Statistic::Acc => "Acc",
            Statistic::BAcc => "bAcc",
            Statistic::Mean => "mean",
        }
    }
}

/// Input to [`bootstrap_ci`]: scalar values (for `Mean`) or
/// `(prediction, truth)` pairs (for `Acc` / `BAcc`).
#[derive(Debug, Clone, Copy)]
pub enum BootstrapData<'a> {
    Values(&'a [f64]),
    Pairs(&'a [(u8, u8)]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub repetitions: usize,
}

enum Canon {
    Values(Vec<f64>),
    Pairs(Vec<(u8, u8)>),
}

impl Canon {
    fn len(&self) -> usize {
        match self {
            Canon::Values(v) => v.len(),
            Canon::Pairs(v) => v.len(),
        }
    }

    fn stat(&self, idx: Option<&[usize]>, s: Statistic) -> Result<Option<f64>> {
        let all: Vec<usize>;
        let idx = match idx {
            Some(i) => i,
            None => {
                all = (0..self.len()).collect();
                &all
            }
        };
        match (self, s) {
            (Canon::Values(v), Statistic::Mean) => {
                Ok(Some(idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64))
            }
            (Canon::Pairs(v), Statistic::Acc | Statistic::BAcc) => {
                let (p, t): (Vec<u8>, Vec<u8>) = idx.iter().map(|&i| v[i]).unzip();
                let m = detection_metrics(&p, &t)?;
                Ok(if s == Statistic::Acc { Some(m.acc) } else { m.bacc })
            }
            (Canon::Values(_), _) => Err(Error::Config(format!(
                "statistic {} needs (prediction, truth) pairs",
                s.as_str()
            ))),
            (Canon::Pairs(_), Statistic::Mean) => {
                Err(Error::Config("statistic mean needs scalar values".into()))
            }
        }
    }
}

/// Index `q·(n-1)` of a sorted slice with linear interpolation.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentile bootstrap interval from `reps` resamples of size `N` drawn
/// with replacement. Inputs are put in canonical order first, so the result
/// depends only on the input multiset, `reps`, `level` and `seed`.
/// Resamples on which the statistic is undefined are redrawn, at most
/// `10 × reps` times in total.
pub fn bootstrap_ci(
    data: BootstrapData<'_>,
    statistic: Statistic,
    reps: usize,
    level: f64,
    seed: u64,
) -> Result<ConfidenceInterval> {
    if reps == 0 {
        return Err(Error::Config("bootstrap needs at least one repetition".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} outside (0, 1)")));
    }
    let canon = match data {
        BootstrapData::Values(v) => {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            Canon::Values(v)
        }
        BootstrapData::Pairs(p) => {
            let mut p = p.to_vec();
            p.sort_unstable();
            Canon::Pairs(p)
        }
    };
    let n = canon.len();
    if n == 0 {
        return Err(Error::Config("bootstrap input is empty".into()));
    }
    let point = canon.stat(None, statistic)?.ok_or_else(|| {
        Error::UndefinedMetric(format!("{} undefined on the full sample", statistic.as_str()))
    })?;
    let cap = 10 * reps;
    let mut redraws = 0usize;
    let mut stats = Vec::with_capacity(reps);
    let mut idx = vec![0usize; n];
    for r in 0..reps {
        let mut rng = substream(seed, r as u64);
        loop {
            idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
            if let Some(s) = canon.stat(Some(&idx), statistic)? {
                stats.push(s);
                break;
            }
            redraws += 1;
            if redraws > cap {
                return Err(Error::UndefinedMetric(format!(
                    "{} undefined on more than {cap} bootstrap resamples",
                    statistic.as_str()
                )));
            }
        }
    }
    stats.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(ConfidenceInterval {
        point,
        lower: percentile(&stats, alpha / 2.0),
        upper: percentile(&stats, 1.0 - alpha / 2.0),
        level,
        repetitions: reps,
    })
}

pub fn ci_to_csv_rows(rows: &[(&str, ConfidenceInterval)]) -> String {
    let mut out = String::from("statistic,point,lower,upper,level,repetitions\n");
    for (name, ci) in rows {
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{}",
            ci.point, ci.lower, ci.upper, ci.level, ci.repetitions
        );
    }
    out
}

const SVG_SIZE: f64 = 320.0;
const SVG_PAD: f64 = 40.0;

fn svg_open(title: &str, x_label: &str, y_label: &str, x_max: f64) -> String {
    let full = SVG_SIZE + 2.0 * SVG_PAD;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}">"#
    );
    let _ = writeln!(s, r#"<rect width="{full}" height="{full}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
        full / 2.0
    );
    let _ = writeln!(
        s,
        r#"<rect x="{SVG_PAD}" y="{SVG_PAD}" width="{SVG_SIZE}" height="{SVG_SIZE}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{x_label} (0 – {x_max:.3})</text>"#,
        full / 2.0,
        full - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 12 {})">{y_label}</text>"#,
        full / 2.0,
        full / 2.0
    );
    s
}

fn sx(v: f64, max: f64) -> f64 {
    SVG_PAD + v / max * SVG_SIZE
}

fn sy(v: f64) -> f64 {
    SVG_PAD + (1.0 - v) * SVG_SIZE
}

/// Reliability diagram: occupied bins as points, plus the diagonal.
pub fn reliability_svg(rows: &[ReliabilityRow], title: &str) -> String {
    let mut s = svg_open(title, "mean confidence", "fraction malicious", 1.0);
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="grey" stroke-dasharray="4 3"/>"#,
        sx(0.0, 1.0),
        sy(0.0),
        sx(1.0, 1.0),
        sy(1.0)
    );
    let pts: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2},{:.2}", sx(r.conf, 1.0), sy(r.frac_pos)))
        .collect();
    if !pts.is_empty() {
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="steelblue"/>"#,
            pts.join(" ")
        );
    }
    for r in rows {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
            sx(r.conf, 1.0),
            sy(r.frac_pos)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Referral curve: accuracy (solid) and coverage (dashed) against τ.
pub fn referral_svg(curve: &ReferralCurve, title: &str) -> String {
    let mut s = svg_open(title, "entropy threshold", "accuracy / coverage", LN_2);
    let acc: Vec<String> = curve
        .points
        .iter()
        .filter_map(|p| Some(format!("{:.2},{:.2}", sx(p.tau, LN_2), sy(p.acc?))))
        .collect();
    let cov: Vec<String> = curve
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", sx(p.tau, LN_2), sy(p.coverage)))
        .collect();
    if !acc.is_empty() {
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="firebrick"/>"#,
            acc.join(" ")
        );
    }
    if !cov.is_empty() {
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="grey" stroke-dasharray="4 3"/>"#,
            cov.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}
