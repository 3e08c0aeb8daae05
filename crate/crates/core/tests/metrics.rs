use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use detcal::metrics::*;
use detcal::PredictiveSample;

const TOL: f64 = 1e-9;

/// Natural-log binary cross-entropy written out independently.
fn ce(p: f64, y: u8) -> f64 {
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[test]
fn confusion_matrix_examples() {
    let m = detection_metrics(&[1, 0, 0, 1], &[1, 1, 0, 0]).unwrap();
    assert_abs_diff_eq!(m.acc, 0.5, epsilon = TOL);
    for v in [m.fnr, m.fpr, m.bacc, m.f1] {
        assert_abs_diff_eq!(v.unwrap(), 0.5, epsilon = TOL);
    }
    let m = detection_metrics(&[1, 1, 1, 1], &[1, 1, 1, 0]).unwrap();
    assert_abs_diff_eq!(m.fnr.unwrap(), 0.0, epsilon = TOL);
    assert_abs_diff_eq!(m.fpr.unwrap(), 1.0, epsilon = TOL);
    assert_abs_diff_eq!(m.acc, 0.75, epsilon = TOL);
    assert_abs_diff_eq!(m.bacc.unwrap(), 0.5, epsilon = TOL);
    // precision 3/4, recall 1
    assert_abs_diff_eq!(m.f1.unwrap(), 2.0 * 0.75 / 1.75, epsilon = TOL);
}

#[test]
fn nll_and_bnll_example() {
    let (p, y) = ([0.9, 0.9, 0.2], [1, 1, 0]);
    let terms: Vec<f64> = p.iter().zip(y).map(|(&p, y)| ce(p, y)).collect();
    assert_abs_diff_eq!(nll(&p, &y).unwrap(), terms.iter().sum::<f64>() / 3.0, epsilon = TOL);
    assert_abs_diff_eq!(nll(&p, &y).unwrap(), 0.14462, epsilon = 1e-5);
    let b = ((terms[0] + terms[1]) / 2.0 + terms[2]) / 2.0;
    assert_abs_diff_eq!(bnll(&p, &y).unwrap(), b, epsilon = TOL);
    assert_abs_diff_eq!(bnll(&p, &y).unwrap(), 0.16425, epsilon = 1e-5);
}

#[test]
fn brier_examples() {
    assert_abs_diff_eq!(bse(&[0.9, 0.2], &[1, 0]).unwrap(), 0.025, epsilon = TOL);
    assert_abs_diff_eq!(bbse(&[0.9, 0.2], &[1, 0]).unwrap(), 0.025, epsilon = TOL);
    assert_abs_diff_eq!(bse(&[0.5; 5], &[1, 0, 0, 1, 1]).unwrap(), 0.25, epsilon = TOL);
    assert_eq!(bse(&[1.0, 0.0], &[1, 0]).unwrap(), 0.0);
}

#[test]
fn worked_binning_example() {
    let bins = bin_stats(&[0.1, 0.3, 0.9], &[0, 0, 1], 2, BinMode::EqualWidth).unwrap();
    assert_eq!(bins.len(), 2);
    assert_eq!(bins[0].count, 2);
    assert_abs_diff_eq!(bins[0].conf.unwrap(), 0.2, epsilon = TOL);
    assert_eq!(bins[0].frac_pos, Some(0.0));
    assert_eq!(bins[1].count, 1);
    assert_abs_diff_eq!(bins[1].conf.unwrap(), 0.9, epsilon = TOL);
    assert_eq!(bins[1].frac_pos, Some(1.0));

    assert_abs_diff_eq!(ece(&bins).unwrap(), 2.0 / 3.0 * 0.2 + 1.0 / 3.0 * 0.1, epsilon = 1e-12);
    assert_abs_diff_eq!(ece(&bins).unwrap(), 0.16667, epsilon = 1e-5);
    assert_abs_diff_eq!(uece(&bins).unwrap(), 0.15, epsilon = 1e-12);
}

#[test]
fn single_bin_and_merged_quantiles() {
    let p = [0.2, 0.4, 0.7, 0.9];
    let y = [0, 1, 1, 1];
    let b = bin_stats(&p, &y, 1, BinMode::EqualWidth).unwrap();
    assert_eq!(b.len(), 1);
    assert_abs_diff_eq!(b[0].conf.unwrap(), 0.55, epsilon = TOL);
    assert_abs_diff_eq!(b[0].frac_pos.unwrap(), 0.75, epsilon = TOL);
    let q = bin_stats(&[0.3; 6], &[0, 1, 0, 1, 0, 1], 5, BinMode::Quantile).unwrap();
    assert_eq!(q.iter().filter(|b| b.count > 0).count(), 1);
    // All examples in one bin: both errors equal that bin's gap.
    let gap = q.iter().find_map(BinStats::gap).unwrap();
    assert_eq!(ece(&q).unwrap(), gap);
    assert_eq!(uece(&q).unwrap(), gap);
}

#[test]
fn entropy_sd_kl_examples() {
    assert_abs_diff_eq!(entropy(&PredictiveSample::single(0.5)), std::f64::consts::LN_2, epsilon = TOL);
    assert!(entropy(&PredictiveSample::single(1.0)) < 1e-10);
    let h = -(0.9f64 * 0.9f64.ln() + 0.1f64 * 0.1f64.ln());
    assert_abs_diff_eq!(entropy(&PredictiveSample::single(0.9)), h, epsilon = TOL);
    assert_abs_diff_eq!(h, 0.325083, epsilon = 1e-6);

    let s = PredictiveSample::uniform(vec![0.2, 0.8]).unwrap();
    assert_abs_diff_eq!(sd(&s).unwrap(), 0.18f64.sqrt(), epsilon = TOL);
    let w = PredictiveSample::new(vec![0.2, 0.8], vec![1.0, 0.0]).unwrap();
    assert_abs_diff_eq!(sd(&w).unwrap(), 0.0, epsilon = TOL);

    let kl = |p: f64, q: f64| p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
    let expect = 0.5 * kl(0.2, 0.5) + 0.5 * kl(0.8, 0.5);
    assert_abs_diff_eq!(kl_disagreement(&s), expect, epsilon = TOL);
    assert_abs_diff_eq!(expect, 0.192745, epsilon = 1e-6);
    assert_eq!(kl_disagreement(&PredictiveSample::single(0.7)), 0.0);
}

#[test]
fn report_has_all_metrics() {
    let p = [0.1, 0.8, 0.6, 0.3, 0.95];
    let y = [0, 1, 0, 0, 1];
    let r = MetricReport::compute(&p, &y, 10, BinMode::EqualWidth).unwrap();
    let entries = r.entries();
    assert_eq!(entries.len(), 11);
    assert!(entries.iter().all(|(_, v)| v.is_some()));
    let csv = r.to_csv_rows();
    assert!(csv.starts_with("metric,value\n"));
    assert_eq!(csv.lines().count(), 12);
}

fn probs_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (1usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..=1.0, n),
            prop::collection::vec(0u8..2, n),
        )
    })
}

proptest! {
    #[test]
    fn balanced_variants_equal_plain(p in prop::collection::vec(0.0f64..=1.0, 2..40)) {
        let n = p.len() / 2 * 2;
        let p = &p[..n];
        let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        prop_assert_eq!(bnll(p, &y).unwrap().to_bits(), nll(p, &y).unwrap().to_bits());
        prop_assert_eq!(bbse(p, &y).unwrap().to_bits(), bse(p, &y).unwrap().to_bits());
    }

    #[test]
    fn calibration_errors_bounded((p, y) in probs_and_labels(), s in 1usize..12, quantile in any::<bool>()) {
        let mode = if quantile { BinMode::Quantile } else { BinMode::EqualWidth };
        let bins = bin_stats(&p, &y, s, mode).unwrap();
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), p.len());
        let max_gap = bins.iter().filter_map(BinStats::gap).fold(0.0, f64::max);
        let e = ece(&bins).unwrap();
        let u = uece(&bins).unwrap();
        prop_assert!((0.0..=max_gap + 1e-12).contains(&e));
        prop_assert!((0.0..=max_gap + 1e-12).contains(&u));
        let r = MetricReport::compute(&p, &y, s, mode).unwrap();
        for name in ["Acc", "bAcc", "F1", "BSE", "bBSE", "ECE", "uECE"] {
            if let Some(v) = r.get(name) {
                prop_assert!((0.0..=1.0).contains(&v), "{} = {}", name, v);
            }
        }
        for name in ["NLL", "bNLL"] {
            if let Some(v) = r.get(name) {
                prop_assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn equal_occupancy_makes_ece_equal_uece(k in 1usize..8, c in 1usize..6) {
        // k bins, each holding c examples at the bin centre.
        let mut p = Vec::new();
        let mut y = Vec::new();
        for s in 0..k {
            let centre = (s as f64 + 0.5) / k as f64;
            for j in 0..c {
                p.push(centre);
                y.push(u8::from(j % 2 == 0));
            }
        }
        let bins = bin_stats(&p, &y, k, BinMode::EqualWidth).unwrap();
        prop_assert_eq!(ece(&bins).unwrap().to_bits(), uece(&bins).unwrap().to_bits());
    }

    #[test]
    fn entropy_symmetric(p in 0.0f64..=1.0) {
        let a = entropy(&PredictiveSample::single(p));
        let b = entropy(&PredictiveSample::single(1.0 - p));
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a <= std::f64::consts::LN_2);
    }

    #[test]
    fn spread_zero_iff_members_agree(v in 0.0f64..=1.0, t in 2usize..8, d in 0.0f64..0.3) {
        let same = PredictiveSample::uniform(vec![v; t]).unwrap();
        prop_assert!(sd(&same).unwrap() < 1e-12);
        prop_assert!(kl_disagreement(&same) < 1e-12);
        let mut members = vec![v; t];
        members[0] = (v + d).min(1.0);
        let s = PredictiveSample::uniform(members.clone()).unwrap();
        let differ = members[0] != v;
        prop_assert_eq!(sd(&s).unwrap() > 0.0, differ);
        prop_assert_eq!(kl_disagreement(&s) > 0.0, differ);
    }
}
