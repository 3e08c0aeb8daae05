//! Detection metrics and uncertainty metrics for binary detectors.
//!
//! Class-conditioned quantities that cannot be computed on the given input
//! (a rate over an absent class, a balanced mean over a single-class set) are
//! `None` in reports or an error from the scalar functions. They are never
//! silently reported as zero.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calib::PredictiveSample;
use crate::error::{Error, Result};
use crate::nn::bce_loss;
use crate::util::{clamp_prob, fmt_opt};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Config(format!(
            "length mismatch: {a} predictions vs {b} labels"
        )));
    }
    if a == 0 {
        return Err(Error::Config("empty evaluation set".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
    pub acc: f64,
    pub bacc: Option<f64>,
    pub f1: Option<f64>,
}

/// FNR, FPR, accuracy, balanced accuracy and F1 with malware (1) as the
/// positive class.
pub fn detection_metrics(preds: &[u8], truth: &[u8]) -> Result<DetectionMetrics> {
    check_lengths(preds.len(), truth.len())?;
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in preds.iter().zip(truth) {
        match (p, y) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => return Err(Error::Config(format!("labels must be 0/1, got ({p}, {y})"))),
        }
    }
    let pos = tp + fn_;
    let neg = tn + fp;
    let fnr = (pos > 0).then(|| fn_ as f64 / pos as f64);
    let fpr = (neg > 0).then(|| fp as f64 / neg as f64);
    let bacc = match (fnr, fpr) {
        (Some(a), Some(b)) => Some(((1.0 - a) + (1.0 - b)) / 2.0),
        _ => None,
    };
    let f1_den = 2 * tp + fp + fn_;
    let f1 = (f1_den > 0).then(|| 2.0 * tp as f64 / f1_den as f64);
    Ok(DetectionMetrics {
        fnr,
        fpr,
        acc: (tp + tn) as f64 / truth.len() as f64,
        bacc,
        f1,
    })
}

pub fn decisions(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= 0.5)).collect()
}

fn per_class_means(
    probs: &[f64],
    truth: &[u8],
    f: impl Fn(f64, u8) -> f64,
    name: &str,
) -> Result<f64> {
    check_lengths(probs.len(), truth.len())?;
    let mut sum = [0.0f64; 2];
    let mut cnt = [0usize; 2];
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(truth) {
        let v = f(p, y);
        sum[usize::from(y)] += v;
        cnt[usize::from(y)] += 1;
        total += v;
    }
    if cnt.contains(&0) {
        return Err(Error::DegenerateClass(format!(
            "{name} needs both classes, got {} benign / {} malicious",
            cnt[0], cnt[1]
        )));
    }
    if cnt[0] == cnt[1] {
        // Same value as the unbalanced mean; summed in example order so the
        // two agree bit for bit.
        return Ok(total / probs.len() as f64);
    }
    Ok((sum[0] / cnt[0] as f64 + sum[1] / cnt[1] as f64) / 2.0)
}

/// Mean per-example binary cross-entropy.
pub fn nll(probs: &[f64], truth: &[u8]) -> Result<f64> {
    check_lengths(probs.len(), truth.len())?;
    Ok(probs.iter().zip(truth).map(|(&p, &y)| bce_loss(p, y)).sum::<f64>() / probs.len() as f64)
}

/// Class-balanced NLL: mean over the two classes of the per-class NLL.
pub fn bnll(probs: &[f64], truth: &[u8]) -> Result<f64> {
    per_class_means(probs, truth, bce_loss, "bNLL")
}

fn sq_err(p: f64, y: u8) -> f64 {
    let d = f64::from(y) - p;
    d * d
}

/// Brier score.
pub fn bse(probs: &[f64], truth: &[u8]) -> Result<f64> {
    check_lengths(probs.len(), truth.len())?;
    Ok(probs.iter().zip(truth).map(|(&p, &y)| sq_err(p, y)).sum::<f64>() / probs.len() as f64)
}

/// Class-balanced Brier score.
pub fn bbse(probs: &[f64], truth: &[u8]) -> Result<f64> {
    per_class_means(probs, truth, sq_err, "bBSE")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinMode {
    EqualWidth,
    Quantile,
}

impl BinMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BinMode::EqualWidth => "equal-width",
            BinMode::Quantile => "quantile",
        }
    }
}

/// One calibration bucket `(lower, upper]`; the first bucket also admits
/// `lower` itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean predicted probability; `None` for an empty bin.
    pub conf: Option<f64>,
    /// Fraction of malicious examples; `None` for an empty bin.
    pub frac_pos: Option<f64>,
}

impl BinStats {
    pub fn gap(&self) -> Option<f64> {
        Some((self.frac_pos? - self.conf?).abs())
    }
}

fn bin_edges(probs: &[f64], bins: usize, mode: BinMode) -> Vec<f64> {
    match mode {
        BinMode::EqualWidth => (0..=bins).map(|s| s as f64 / bins as f64).collect(),
        BinMode::Quantile => {
            let mut sorted = probs.to_vec();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let max = sorted.last().copied().unwrap_or(1.0);
            let mut edges = vec![0.0];
            for s in 1..bins {
                // lower empirical quantile at level s/S
                let rank = (s * n).div_ceil(bins).max(1);
                let q = sorted[rank - 1];
                if q > *edges.last().unwrap() && q < max && q < 1.0 {
                    edges.push(q);
                }
            }
            edges.push(1.0);
            edges
        }
    }
}

/// Bucket probabilities into `bins` bins and collect per-bin statistics.
/// Quantile mode merges duplicate edges, so it may return fewer bins.
pub fn bin_stats(probs: &[f64], truth: &[u8], bins: usize, mode: BinMode) -> Result<Vec<BinStats>> {
    if bins == 0 {
        return Err(Error::Config("number of bins must be positive".into()));
    }
    check_lengths(probs.len(), truth.len())?;
    let edges = bin_edges(probs, bins, mode);
    let k = edges.len() - 1;
    let mut count = vec![0usize; k];
    let mut psum = vec![0.0f64; k];
    let mut pos = vec![0usize; k];
    for (&p, &y) in probs.iter().zip(truth) {
        // first s with p <= edges[s + 1]
        let s = edges[1..].partition_point(|&e| e < p).min(k - 1);
        count[s] += 1;
        psum[s] += p;
        pos[s] += usize::from(y == 1);
    }
    Ok((0..k)
        .map(|s| {
            let c = count[s];
            BinStats {
                lower: edges[s],
                upper: edges[s + 1],
                count: c,
                conf: (c > 0).then(|| psum[s] / c as f64),
                frac_pos: (c > 0).then(|| pos[s] as f64 / c as f64),
            }
        })
        .collect())
}

fn check_occupied(bins: &[BinStats]) -> Result<usize> {
    let n: usize = bins.iter().map(|b| b.count).sum();
    if n == 0 {
        return Err(Error::UndefinedMetric("every calibration bin is empty".into()));
    }
    Ok(n)
}

/// Expected calibration error: bin gaps weighted by occupancy.
pub fn ece(bins: &[BinStats]) -> Result<f64> {
    let n = check_occupied(bins)? as f64;
    let mut occupied = bins.iter().filter(|b| b.count > 0).map(|b| b.count);
    let first = occupied.next();
    if occupied.all(|c| Some(c) == first) {
        // Equal occupancy makes the weighted and unweighted means coincide.
        return uece(bins);
    }
    Ok(bins
        .iter()
        .filter_map(|b| b.gap().map(|g| b.count as f64 / n * g))
        .sum())
}

/// Unweighted ECE: plain mean of the gaps of the non-empty bins.
pub fn uece(bins: &[BinStats]) -> Result<f64> {
    check_occupied(bins)?;
    let gaps: Vec<f64> = bins.iter().filter_map(BinStats::gap).collect();
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Binary entropy (nats) of a clamped probability, capped at `ln 2`.
pub fn binary_entropy(p: f64) -> f64 {
    let p = clamp_prob(p);
    (-(p * p.ln() + (1.0 - p) * (1.0 - p).ln())).min(std::f64::consts::LN_2)
}

/// Predictive entropy of the weighted mean probability.
pub fn entropy(sample: &PredictiveSample) -> f64 {
    binary_entropy(sample.mean())
}

/// Weighted member spread `sqrt(T/(T-1) Σ w_i (p_i - p̄)²)`.
pub fn sd(sample: &PredictiveSample) -> Result<f64> {
    let t = sample.len();
    if t < 2 {
        return Err(Error::UndefinedMetric(
            "standard deviation needs at least two members".into(),
        ));
    }
    let mean = sample.mean();
    let var: f64 = sample
        .iter()
        .map(|(p, w)| w * (p - mean) * (p - mean))
        .sum();
    Ok((t as f64 / (t as f64 - 1.0) * var).sqrt())
}

/// `KL(Bern(p) ‖ Bern(q))` with both arguments clamped.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let (p, q) = (clamp_prob(p), clamp_prob(q));
    (p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()).max(0.0)
}

/// Weighted mean KL of each member against the weighted mean prediction.
pub fn kl_disagreement(sample: &PredictiveSample) -> f64 {
    let mean = sample.mean();
    sample.iter().map(|(p, w)| w * bernoulli_kl(p, mean)).sum()
}

/// The eleven-entry metric table computed for one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
    pub acc: Option<f64>,
    pub bacc: Option<f64>,
    pub f1: Option<f64>,
    pub nll: Option<f64>,
    pub bnll: Option<f64>,
    pub bse: Option<f64>,
    pub bbse: Option<f64>,
    pub ece: Option<f64>,
    pub uece: Option<f64>,
}

pub const METRIC_NAMES: [&str; 11] = [
    "FNR", "FPR", "Acc", "bAcc", "F1", "NLL", "bNLL", "BSE", "bBSE", "ECE", "uECE",
];

impl MetricReport {
    /// All metrics from mean probabilities; balanced quantities on a
    /// single-class set are `None`.
    pub fn compute(probs: &[f64], truth: &[u8], bins: usize, mode: BinMode) -> Result<Self> {
        let det = detection_metrics(&decisions(probs), truth)?;
        let table = bin_stats(probs, truth, bins, mode)?;
        Ok(Self {
            fnr: det.fnr,
            fpr: det.fpr,
            acc: Some(det.acc),
            bacc: det.bacc,
            f1: det.f1,
            nll: Some(nll(probs, truth)?),
            bnll: bnll(probs, truth).ok(),
            bse: Some(bse(probs, truth)?),
            bbse: bbse(probs, truth).ok(),
            ece: ece(&table).ok(),
            uece: uece(&table).ok(),
        })
    }

    pub fn entries(&self) -> [(&'static str, Option<f64>); 11] {
        let v = [
            self.fnr, self.fpr, self.acc, self.bacc, self.f1, self.nll, self.bnll, self.bse,
            self.bbse, self.ece, self.uece,
        ];
        std::array::from_fn(|i| (METRIC_NAMES[i], v[i]))
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries()
            .into_iter()
            .find(|(n, _)| *n == name)
            .and_then(|(_, v)| v)
    }

    /// `metric,value` rows.
    pub fn to_csv_rows(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in self.entries() {
            let _ = writeln!(out, "{name},{}", fmt_opt(v));
        }
        out
    }
}

/// `lower,upper,count,conf,frac_pos` rows.
pub fn bins_to_csv_rows(bins: &[BinStats]) -> String {
    let mut out = String::from("lower,upper,count,conf,frac_pos\n");
    for b in bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            b.lower,
            b.upper,
            b.count,
            fmt_opt(b.conf),
            fmt_opt(b.frac_pos)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn detection_all_correct() {
        let m = detection_metrics(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(m.acc, 1.0);
        assert_eq!(m.bacc, Some(1.0));
        assert_eq!(m.f1, Some(1.0));
        assert_eq!(m.fnr, Some(0.0));
        assert_eq!(m.fpr, Some(0.0));
    }

    #[test]
    fn detection_missing_class_is_undefined() {
        let m = detection_metrics(&[1, 0], &[1, 1]).unwrap();
        assert_eq!(m.fpr, None);
        assert_eq!(m.bacc, None);
        assert_eq!(m.fnr, Some(0.5));
        assert!(detection_metrics(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn balanced_refuse_single_class() {
        assert!(matches!(bnll(&[0.2, 0.3], &[1, 1]), Err(Error::DegenerateClass(_))));
        assert!(matches!(bbse(&[0.2], &[0]), Err(Error::DegenerateClass(_))));
    }

    #[test]
    fn bin_boundaries_are_right_closed() {
        let b = bin_stats(&[0.0, 0.3, 0.30000000000000004, 1.0], &[0, 0, 1, 1], 10, BinMode::EqualWidth)
            .unwrap();
        assert_eq!(b[0].count, 1);
        assert_eq!(b[2].count, 1);
        assert_eq!(b[3].count, 1);
        assert_eq!(b[9].count, 1);
    }

    #[test]
    fn quantile_edges() {
        let b = bin_stats(&[0.1, 0.2, 0.3, 0.4], &[0, 0, 1, 1], 2, BinMode::Quantile).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].count, b[1].count), (2, 2));
        let same = bin_stats(&[0.7; 5], &[0, 1, 0, 1, 1], 10, BinMode::Quantile).unwrap();
        assert_eq!(same.len(), 1);
        assert_eq!(same[0].count, 5);
    }

    #[test]
    fn empty_bins_are_undefined() {
        let empty = [BinStats {
            lower: 0.0,
            upper: 1.0,
            count: 0,
            conf: None,
            frac_pos: None,
        }];
        assert!(matches!(ece(&empty), Err(Error::UndefinedMetric(_))));
        assert!(uece(&empty).is_err());
    }

    #[test]
    fn sd_needs_two_members() {
        let s = PredictiveSample::single(0.3);
        assert!(matches!(sd(&s), Err(Error::UndefinedMetric(_))));
        assert_eq!(kl_disagreement(&s), 0.0);
    }

    #[test]
    fn entropy_symmetric_and_max() {
        close(binary_entropy(0.5), std::f64::consts::LN_2, 1e-15);
        close(binary_entropy(0.2), binary_entropy(0.8), 1e-15);
        assert!(binary_entropy(1.0) < 1e-10);
    }

    #[test]
    fn report_on_single_class_set() {
        let r = MetricReport::compute(&[0.9, 0.2, 0.7], &[1, 1, 1], 10, BinMode::EqualWidth).unwrap();
        assert_eq!(r.fpr, None);
        assert_eq!(r.bnll, None);
        assert!(r.nll.is_some());
        assert!(r.to_csv_rows().contains("bNLL,undefined"));
    }
}
