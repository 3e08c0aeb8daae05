//! C ABI over the `detcal` library.
//!
//! Datasets and detectors cross the boundary as opaque handles that the
//! caller frees with the matching `*_free` function. Every fallible function
//! returns a [`DetcalStatus`]; on failure the message is kept per thread and
//! can be copied out with [`detcal_last_error_message`]. Panics are caught
//! and reported as [`DetcalStatus::Panic`].
//!
//! Metrics that are undefined for the given input are reported as NaN.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use detcal::calib::{self, CalibratedDetector};
use detcal::data::{self, LabeledDataset};
use detcal::metrics::{self, BinMode, MetricReport, METRIC_NAMES};
use detcal::rng::substream;
use detcal::{Error, PredictiveSample};

/// Number of entries in a [`DetcalMetricReport`].
pub const DETCAL_METRIC_COUNT: usize = 11;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetcalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InputShape = 3,
    NumericOverflow = 4,
    Config = 5,
    Divergence = 6,
    DegenerateValidation = 7,
    DegenerateClass = 8,
    UndefinedMetric = 9,
    Mode = 10,
    Parse = 11,
    Io = 12,
    Serde = 13,
    Panic = 14,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetcalBinMode {
    EqualWidth = 0,
    Quantile = 1,
}

impl From<DetcalBinMode> for BinMode {
    fn from(m: DetcalBinMode) -> Self {
        match m {
            DetcalBinMode::EqualWidth => BinMode::EqualWidth,
            DetcalBinMode::Quantile => BinMode::Quantile,
        }
    }
}

/// Metric values in the order of [`detcal_metric_name`]; NaN when undefined.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DetcalMetricReport {
    pub values: [f64; DETCAL_METRIC_COUNT],
}

/// Opaque dataset handle.
pub struct DetcalDataset {
    inner: LabeledDataset,
}

/// Opaque detector handle.
pub struct DetcalDetector {
    inner: CalibratedDetector,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DetcalStatus {
    match e {
        Error::InputShape { .. } => DetcalStatus::InputShape,
        Error::NumericOverflow(_) => DetcalStatus::NumericOverflow,
        Error::Config(_) => DetcalStatus::Config,
        Error::Divergence { .. } => DetcalStatus::Divergence,
        Error::DegenerateValidation(_) => DetcalStatus::DegenerateValidation,
        Error::DegenerateClass(_) => DetcalStatus::DegenerateClass,
        Error::UndefinedMetric(_) => DetcalStatus::UndefinedMetric,
        Error::Mode(_) => DetcalStatus::Mode,
        Error::Parse { .. } => DetcalStatus::Parse,
        Error::Stage { source, .. } => status_of(source),
        Error::Io { .. } => DetcalStatus::Io,
        Error::Serde(_) => DetcalStatus::Serde,
    }
}

enum Fail {
    Status(DetcalStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(DetcalStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail::Status(DetcalStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DetcalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DetcalStatus::Ok,
        Ok(Err(Fail::Status(s, msg))) => {
            set_last_error(msg);
            s
        }
        Ok(Err(Fail::Lib(e))) => {
            set_last_error(format!("{}: {e}", e.kind()));
            status_of(&e)
        }
        Err(_) => {
            set_last_error("panic inside detcal".into());
            DetcalStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn detcal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes). Returns the full message length in bytes,
/// or 0 when no error has occurred.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn detcal_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Name of metric `index` in [`DetcalMetricReport::values`], or null when
/// out of range.
#[no_mangle]
pub extern "C" fn detcal_metric_name(index: usize) -> *const c_char {
    const NAMES: [&str; DETCAL_METRIC_COUNT] = [
        "FNR\0", "FPR\0", "Acc\0", "bAcc\0", "F1\0", "NLL\0", "bNLL\0", "BSE\0", "bBSE\0",
        "ECE\0", "uECE\0",
    ];
    debug_assert!(NAMES
        .iter()
        .zip(METRIC_NAMES)
        .all(|(a, b)| a.trim_end_matches('\0') == b));
    NAMES.get(index).map_or(ptr::null(), |s| s.as_ptr().cast())
}

/// Load a dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn detcal_dataset_load(
    path: *const c_char,
    out: *mut *mut DetcalDataset,
) -> DetcalStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = data::load_dataset(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DetcalDataset { inner: ds }));
        Ok(())
    })
}

/// Number of examples, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn detcal_dataset_len(ds: *const DetcalDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Feature dimension, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn detcal_dataset_dimension(ds: *const DetcalDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.dimension)
}

/// Copy the labels into `out` (`len` must equal the dataset length).
///
/// # Safety
/// `ds` must be a live handle; `out` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn detcal_dataset_labels(
    ds: *const DetcalDataset,
    out: *mut u8,
    len: usize,
) -> DetcalStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if len != ds.inner.len() {
            return Err(invalid(format!("expected {} labels, got room for {len}", ds.inner.len())));
        }
        let labels = ds.inner.labels()?;
        out_slice(out, len, "out")?.copy_from_slice(&labels);
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from [`detcal_dataset_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn detcal_dataset_free(ds: *mut DetcalDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Load a detector bundle directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn detcal_detector_load(
    path: *const c_char,
    out: *mut *mut DetcalDetector,
) -> DetcalStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let det = calib::load_bundle(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DetcalDetector { inner: det }));
        Ok(())
    })
}

/// Input dimension, or 0 for a null handle.
///
/// # Safety
/// `det` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn detcal_detector_input_dim(det: *const DetcalDetector) -> usize {
    det.as_ref().map_or(0, |d| d.inner.input_dim())
}

/// # Safety
/// `det` must be null or a handle from [`detcal_detector_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn detcal_detector_free(det: *mut DetcalDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

fn write_outputs(
    samples: &[PredictiveSample],
    probs: &mut [f64],
    entropy: Option<&mut [f64]>,
) {
    for (p, s) in probs.iter_mut().zip(samples) {
        *p = s.mean();
    }
    if let Some(h) = entropy {
        for (h, s) in h.iter_mut().zip(samples) {
            *h = metrics::entropy(s);
        }
    }
}

/// Predict `rows` row-major feature vectors of length `dim`. Row `i` draws
/// its stochastic passes from the substream `(seed, i)`, matching the
/// library's dataset prediction. `out_entropy` may be null.
///
/// # Safety
/// `features` must point to `rows * dim` doubles; `out_probs` (and
/// `out_entropy` when non-null) to `rows` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn detcal_detector_predict(
    det: *const DetcalDetector,
    features: *const f64,
    rows: usize,
    dim: usize,
    seed: u64,
    out_probs: *mut f64,
    out_entropy: *mut f64,
) -> DetcalStatus {
    guard(|| {
        let det = &det.as_ref().ok_or_else(|| null("detector"))?.inner;
        if dim != det.input_dim() {
            return Err(Error::InputShape {
                expected: det.input_dim(),
                got: dim,
            }
            .into());
        }
        let n = rows.checked_mul(dim).ok_or_else(|| invalid("rows * dim overflows"))?;
        let x = slice_arg(features, n, "features")?;
        let samples = (0..rows)
            .map(|i| det.predict(&x[i * dim..(i + 1) * dim], &mut substream(seed, i as u64)))
            .collect::<detcal::Result<Vec<_>>>()?;
        let probs = out_slice(out_probs, rows, "out_probs")?;
        let entropy = if out_entropy.is_null() {
            None
        } else {
            Some(out_slice(out_entropy, rows, "out_entropy")?)
        };
        write_outputs(&samples, probs, entropy);
        Ok(())
    })
}

/// Predict every example of a dataset; `len` must equal its length.
/// `out_entropy` may be null.
///
/// # Safety
/// Handles must be live; outputs must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn detcal_detector_predict_dataset(
    det: *const DetcalDetector,
    ds: *const DetcalDataset,
    seed: u64,
    out_probs: *mut f64,
    out_entropy: *mut f64,
    len: usize,
) -> DetcalStatus {
    guard(|| {
        let det = &det.as_ref().ok_or_else(|| null("detector"))?.inner;
        let ds = &ds.as_ref().ok_or_else(|| null("dataset"))?.inner;
        if len != ds.len() {
            return Err(invalid(format!("expected {} outputs, got room for {len}", ds.len())));
        }
        let samples = det.predict_dataset(ds, seed)?;
        let probs = out_slice(out_probs, len, "out_probs")?;
        let entropy = if out_entropy.is_null() {
            None
        } else {
            Some(out_slice(out_entropy, len, "out_entropy")?)
        };
        write_outputs(&samples, probs, entropy);
        Ok(())
    })
}

unsafe fn inputs<'a>(
    probs: *const f64,
    labels: *const u8,
    n: usize,
) -> Result<(&'a [f64], &'a [u8]), Fail> {
    Ok((slice_arg(probs, n, "probs")?, slice_arg(labels, n, "labels")?))
}

/// All eleven metrics of `n` predicted probabilities against 0/1 labels.
///
/// # Safety
/// `probs` and `labels` must point to `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn detcal_metric_report(
    probs: *const f64,
    labels: *const u8,
    n: usize,
    bins: usize,
    mode: DetcalBinMode,
    out: *mut DetcalMetricReport,
) -> DetcalStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (p, y) = inputs(probs, labels, n)?;
        let report = MetricReport::compute(p, y, bins, mode.into())?;
        for (slot, (_, v)) in out.values.iter_mut().zip(report.entries()) {
            *slot = v.unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Expected calibration error (`unweighted == false`) or its unweighted
/// variant over non-empty bins.
///
/// # Safety
/// `probs` and `labels` must point to `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn detcal_calibration_error(
    probs: *const f64,
    labels: *const u8,
    n: usize,
    bins: usize,
    mode: DetcalBinMode,
    unweighted: bool,
    out: *mut f64,
) -> DetcalStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (p, y) = inputs(probs, labels, n)?;
        let stats = metrics::bin_stats(p, y, bins, mode.into())?;
        *out = if unweighted {
            metrics::uece(&stats)?
        } else {
            metrics::ece(&stats)?
        };
        Ok(())
    })
}

/// Entropy of the weighted-mean prediction of `count` member probabilities.
/// `weights` may be null for uniform weights.
///
/// # Safety
/// `member_probs` (and `weights` when non-null) must point to `count`
/// doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn detcal_predictive_entropy(
    member_probs: *const f64,
    weights: *const f64,
    count: usize,
    out: *mut f64,
) -> DetcalStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let p = slice_arg(member_probs, count, "member_probs")?.to_vec();
        let s = if weights.is_null() {
            PredictiveSample::uniform(p)?
        } else {
            PredictiveSample::new(p, slice_arg(weights, count, "weights")?.to_vec())?
        };
        *out = metrics::entropy(&s);
        Ok(())
    })
}
