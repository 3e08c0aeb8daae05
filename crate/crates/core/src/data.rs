//! Labelled datasets and the text dataset file format.
//!
//! ```text
//! # detcal-dataset v1
//! # dimension=3
//! # mode=binary
//! # generator=gen_dataset            <- any further key=value lines are provenance
//! id,label,month,f0,f1,f2
//! e0,1,,0,1,1
//! e1,?,4,1,0,0
//! ```
//!
//! `label` is `0`, `1` or `?` (unlabelled); `month` is empty or a
//! non-negative integer. Real features are written with Rust's shortest
//! round-trip float formatting, so save followed by load is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

const MAGIC: &str = "# detcal-dataset v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    DenseReal,
    BinaryDrebinLike,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::DenseReal => "dense-real",
            FeatureMode::BinaryDrebinLike => "binary-drebin-like",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dense-real" => Some(FeatureMode::DenseReal),
            "binary-drebin-like" | "binary" => Some(FeatureMode::BinaryDrebinLike),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Vec<f64>,
    pub label: Option<u8>,
    pub month: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dimension: usize,
    pub mode: FeatureMode,
    pub examples: Vec<Example>,
    /// Ordered `key=value` provenance lines carried in the file header.
    pub provenance: Vec<(String, String)>,
}

impl LabeledDataset {
    pub fn new(dimension: usize, mode: FeatureMode) -> Self {
        Self {
            dimension,
            mode,
            examples: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn features(&self) -> impl Iterator<Item = &[f64]> {
        self.examples.iter().map(|e| e.features.as_slice())
    }

    /// Labels of every example; errors if any example is unlabelled.
    pub fn labels(&self) -> Result<Vec<u8>> {
        self.examples
            .iter()
            .map(|e| {
                e.label
                    .ok_or_else(|| Error::Config(format!("example {} has no label", e.id)))
            })
            .collect()
    }

    pub fn positive_fraction(&self) -> f64 {
        let pos = self.examples.iter().filter(|e| e.label == Some(1)).count();
        pos as f64 / self.examples.len().max(1) as f64
    }

    pub fn set_provenance(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        if let Some(slot) = self.provenance.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value;
        } else {
            self.provenance.push((key.to_string(), value));
        }
    }

    pub fn provenance_value(&self, key: &str) -> Option<&str> {
        self.provenance
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// A dataset holding the examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            dimension: self.dimension,
            mode: self.mode,
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn filter_label(&self, label: u8) -> Self {
        Self {
            dimension: self.dimension,
            mode: self.mode,
            examples: self
                .examples
                .iter()
                .filter(|e| e.label == Some(label))
                .cloned()
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        let _ = writeln!(out, "# dimension={}", self.dimension);
        let _ = writeln!(out, "# mode={}", self.mode.as_str());
        for (k, v) in &self.provenance {
            let _ = writeln!(out, "# {k}={v}");
        }
        out.push_str("id,label,month");
        for j in 0..self.dimension {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for ex in &self.examples {
            out.push_str(&ex.id);
            match ex.label {
                Some(l) => {
                    let _ = write!(out, ",{l}");
                }
                None => out.push_str(",?"),
            }
            match ex.month {
                Some(m) => {
                    let _ = write!(out, ",{m}");
                }
                None => out.push(','),
            }
            for &v in &ex.features {
                match self.mode {
                    FeatureMode::BinaryDrebinLike => {
                        out.push_str(if v == 0.0 { ",0" } else { ",1" })
                    }
                    FeatureMode::DenseReal => {
                        let _ = write!(out, ",{v}");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, field: &str, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            field: field.to_string(),
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim_end() == MAGIC => {}
            _ => return Err(perr(1, "header", format!("expected `{MAGIC}`"))),
        }
        let mut dimension = None;
        let mut mode = None;
        let mut provenance = Vec::new();
        let mut header_seen = false;
        let mut examples = Vec::new();
        for (lineno, raw) in lines {
            let line = raw.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            if !header_seen {
                if let Some(meta) = line.strip_prefix("# ") {
                    let (k, v) = meta
                        .split_once('=')
                        .ok_or_else(|| perr(lineno, "header", "expected key=value".into()))?;
                    match k {
                        "dimension" => {
                            dimension = Some(v.parse::<usize>().map_err(|e| {
                                perr(lineno, "dimension", e.to_string())
                            })?)
                        }
                        "mode" => {
                            mode = Some(FeatureMode::parse(v).ok_or_else(|| {
                                perr(lineno, "mode", format!("unknown mode `{v}`"))
                            })?)
                        }
                        _ => provenance.push((k.to_string(), v.to_string())),
                    }
                    continue;
                }
                if line.starts_with("id,label,month") {
                    let dim = dimension
                        .ok_or_else(|| perr(lineno, "dimension", "missing header".into()))?;
                    let cols = line.split(',').count();
                    if cols != dim + 3 {
                        return Err(perr(
                            lineno,
                            "columns",
                            format!("dimension mismatch: header declares {dim}, column row has {}", cols.saturating_sub(3)),
                        ));
                    }
                    header_seen = true;
                    continue;
                }
                return Err(perr(lineno, "header", "expected column header row".into()));
            }
            let dim = dimension.unwrap_or(0);
            let mode = mode.unwrap_or(FeatureMode::DenseReal);
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 3 {
                return Err(perr(
                    lineno,
                    "features",
                    format!(
                        "dimension mismatch: expected {dim} features, found {}",
                        fields.len().saturating_sub(3)
                    ),
                ));
            }
            let label = match fields[1] {
                "0" => Some(0),
                "1" => Some(1),
                "?" => None,
                other => {
                    return Err(perr(lineno, "label", format!("invalid label `{other}`")))
                }
            };
            let month = if fields[2].is_empty() {
                None
            } else {
                Some(
                    fields[2]
                        .parse::<u32>()
                        .map_err(|e| perr(lineno, "month", e.to_string()))?,
                )
            };
            let mut features = Vec::with_capacity(dim);
            for (j, f) in fields[3..].iter().enumerate() {
                let v: f64 = f
                    .parse()
                    .map_err(|_| perr(lineno, &format!("f{j}"), format!("invalid number `{f}`")))?;
                if !v.is_finite() {
                    return Err(perr(lineno, &format!("f{j}"), "non-finite value".into()));
                }
                if mode == FeatureMode::BinaryDrebinLike && v != 0.0 && v != 1.0 {
                    return Err(perr(lineno, &format!("f{j}"), format!("binary feature `{f}`")));
                }
                features.push(v);
            }
            examples.push(Example {
                id: fields[0].to_string(),
                features,
                label,
                month,
            });
        }
        let dimension =
            dimension.ok_or_else(|| perr(1, "dimension", "missing dimension header".into()))?;
        Ok(Self {
            dimension,
            mode: mode.ok_or_else(|| perr(1, "mode", "missing mode header".into()))?,
            examples,
            provenance,
        })
    }
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let text = util::read_to_string(path)?;
    LabeledDataset::parse(&text, path)
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    util::write_atomic(path, ds.to_text().as_bytes())
}

/// Split fractions for train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all_pos = self.train > 0.0 && self.val > 0.0 && self.test > 0.0;
        if !all_pos || (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

/// Seeded shuffle then contiguous split.
pub fn split_dataset(ds: &LabeledDataset, fr: SplitFractions, seed: u64) -> Result<Splits> {
    use rand::seq::SliceRandom;
    fr.validate()?;
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut crate::rng::rng_from_seed(seed));
    let n = ds.len();
    let n_train = (fr.train * n as f64).round() as usize;
    let n_val = ((fr.val * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let (tr, rest) = idx.split_at(n_train);
    let (va, te) = rest.split_at(n_val);
    let mut out = Splits {
        train: ds.subset(tr),
        val: ds.subset(va),
        test: ds.subset(te),
    };
    out.train.set_provenance("split", "train");
    out.val.set_provenance("split", "val");
    out.test.set_provenance("split", "test");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabeledDataset {
        let mut ds = LabeledDataset::new(2, FeatureMode::DenseReal);
        ds.examples = vec![
            Example {
                id: "a".into(),
                features: vec![0.1, -2.5e-17],
                label: Some(1),
                month: None,
            },
            Example {
                id: "b".into(),
                features: vec![1.0 / 3.0, 7.0],
                label: Some(0),
                month: Some(3),
            },
            Example {
                id: "c".into(),
                features: vec![-0.0, f64::MAX],
                label: None,
                month: None,
            },
        ];
        ds.set_provenance("generator", "test");
        ds
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = tiny();
        let back = LabeledDataset::parse(&ds.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back.examples.len(), 3);
        for (a, b) in ds.examples.iter().zip(&back.examples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.month, b.month);
            let ab: Vec<u64> = a.features.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.features.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.provenance, ds.provenance);
    }

    #[test]
    fn label_two_is_rejected_with_line() {
        let text = tiny().to_text().replace("b,0,3", "b,2,3");
        let err = LabeledDataset::parse(&text, Path::new("x.csv")).unwrap_err();
        match err {
            Error::Parse { line, field, .. } => {
                assert_eq!(line, 7);
                assert_eq!(field, "label");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_feature_column_is_rejected() {
        let text = tiny().to_text().replace("b,0,3,0.3333333333333333,7", "b,0,3,7");
        let err = LabeledDataset::parse(&text, Path::new("x.csv")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dimension mismatch"), "{msg}");
        assert!(msg.contains(":7:"), "{msg}");
    }

    #[test]
    fn binary_mode_rejects_fractional() {
        let mut ds = LabeledDataset::new(1, FeatureMode::BinaryDrebinLike);
        ds.examples.push(Example {
            id: "z".into(),
            features: vec![1.0],
            label: Some(1),
            month: None,
        });
        let text = ds.to_text().replace("z,1,,1", "z,1,,0.5");
        assert!(LabeledDataset::parse(&text, Path::new("b")).is_err());
    }

    #[test]
    fn split_sizes() {
        let mut ds = LabeledDataset::new(1, FeatureMode::DenseReal);
        for i in 0..100 {
            ds.examples.push(Example {
                id: format!("{i}"),
                features: vec![i as f64],
                label: Some((i % 2) as u8),
                month: None,
            });
        }
        let s = split_dataset(&ds, SplitFractions::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
        assert!(split_dataset(
            &ds,
            SplitFractions {
                train: 0.5,
                val: 0.2,
                test: 0.2
            },
            1
        )
        .is_err());
    }
}
