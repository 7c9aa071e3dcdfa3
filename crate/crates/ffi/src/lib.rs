//! C ABI over the refdense library.
//!
//! Datasets and models are opaque handles created by `rd_*_load`/`rd_*_generate`/
//! `rd_model_train` and released with the matching `rd_*_free`. Every fallible call
//! returns an [`RdStatus`]; on failure `rd_last_error` describes the most recent error
//! on the calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use refdense::features::{load_dataset, Dataset};
use refdense::labels::DenseLabelGrid;
use refdense::metrics::{average_precision, per_frame_map, Prediction};
use refdense::model::Model;
use refdense::synth::{generate, SynthSpec};
use refdense::trainer::{
    check_compatible, evaluate, load_checkpoint, save_checkpoint, train, CheckpointHeader,
    TrainConfig,
};
use refdense::{Error, Tensor};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RdStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Malformed input: schema, configuration, dimensions or encoding.
    InvalidInput = 2,
    Io = 3,
    /// Training diverged or another runtime failure occurred.
    Runtime = 4,
    /// The output buffer is too small; required sizes are still reported.
    BufferTooSmall = 5,
    /// Average precision is undefined without positive labels.
    NoPositives = 6,
    Panic = 7,
}

/// Opaque dataset handle.
pub struct RdDataset(Dataset);

/// Opaque model handle.
pub struct RdModel(Model);

/// Which sequences of a dataset to address.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RdSplit {
    Train = 0,
    Test = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> RdStatus {
    match err {
        Error::Io { .. } | Error::OutputExists(_) => RdStatus::Io,
        e if e.exit_code() == 3 => RdStatus::Runtime,
        _ => RdStatus::InvalidInput,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), RdStatus>) -> RdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RdStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            RdStatus::Panic
        }
    }
}

fn fail(err: Error) -> RdStatus {
    let s = status_of(&err);
    set_error(err.to_string());
    s
}

fn null(what: &str) -> RdStatus {
    set_error(format!("{what} is null"));
    RdStatus::NullArgument
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, RdStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        RdStatus::InvalidInput
    })
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, RdStatus> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(
    text: Option<&str>,
    what: &str,
) -> Result<Option<T>, RdStatus> {
    text.map(|t| {
        serde_json::from_str(t).map_err(|e| {
            set_error(format!("{what}: {e}"));
            RdStatus::InvalidInput
        })
    })
    .transpose()
}

/// Message of the last failed call on this thread, or null. Valid until the next call
/// that fails on the same thread.
#[no_mangle]
pub extern "C" fn rd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a dataset from its manifest JSON.
///
/// # Safety
/// `manifest_path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rd_dataset_load(
    manifest_path: *const c_char,
    out: *mut *mut RdDataset,
) -> RdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(manifest_path, "manifest_path")?;
        let ds = load_dataset(Path::new(path)).map_err(fail)?;
        *out = Box::into_raw(Box::new(RdDataset(ds)));
        Ok(())
    })
}

/// Generates a synthetic dataset from a SynthSpec JSON (null for the defaults).
///
/// # Safety
/// `spec_json` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rd_dataset_generate(
    spec_json: *const c_char,
    out: *mut *mut RdDataset,
) -> RdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec: SynthSpec =
            parse_json(opt_str_arg(spec_json, "spec_json")?, "spec")?.unwrap_or_default();
        let ds = generate(&spec).map_err(fail)?;
        *out = Box::into_raw(Box::new(RdDataset(ds.dataset)));
        Ok(())
    })
}

/// Releases a dataset; null is ignored.
///
/// # Safety
/// `ds` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rd_dataset_free(ds: *mut RdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of sequences in a split (0 for a null handle).
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rd_dataset_len(ds: *const RdDataset, split: RdSplit) -> usize {
    match ds.as_ref() {
        None => 0,
        Some(d) => match split {
            RdSplit::Train => d.0.train.len(),
            RdSplit::Test => d.0.test.len(),
        },
    }
}

/// Number of action classes (0 for a null handle).
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rd_dataset_num_actions(ds: *const RdDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.vocab.num_actions())
}

/// Trains a model. `config_json` holds TrainConfig fields overriding the synthetic
/// preset and may be null.
///
/// # Safety
/// `ds` must be live, `config_json` null or NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rd_model_train(
    ds: *const RdDataset,
    config_json: *const c_char,
    out: *mut *mut RdModel,
) -> RdStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let patch: Option<serde_json::Value> =
            parse_json(opt_str_arg(config_json, "config_json")?, "config")?;
        let cfg = match patch {
            Some(p) => TrainConfig::synthetic_with(p).map_err(fail)?,
            None => TrainConfig::synthetic(),
        };
        let outcome = train(&ds.0, &cfg, &mut ()).map_err(fail)?;
        *out = Box::into_raw(Box::new(RdModel(outcome.best_model)));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rd_model_load(path: *const c_char, out: *mut *mut RdModel) -> RdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let (_, model) = load_checkpoint(Path::new(path)).map_err(fail)?;
        *out = Box::into_raw(Box::new(RdModel(model)));
        Ok(())
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `model` must be live and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rd_model_save(model: *const RdModel, path: *const c_char) -> RdStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let path = str_arg(path, "path")?;
        let header = CheckpointHeader {
            model: model.0.config.clone(),
            train: None,
            epoch: None,
            val_map: None,
        };
        save_checkpoint(Path::new(path), &header, &model.0.params).map_err(fail)
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rd_model_free(model: *mut RdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Per-frame test mAP of `model` on `ds`. Fails with `RD_STATUS_NO_POSITIVES` when
/// no class has a positive frame.
///
/// # Safety
/// Handles must be live and `map_out` valid.
#[no_mangle]
pub unsafe extern "C" fn rd_model_evaluate(
    model: *const RdModel,
    ds: *const RdDataset,
    map_out: *mut f64,
) -> RdStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if map_out.is_null() {
            return Err(null("map_out"));
        }
        check_compatible(&model.0, &ds.0).map_err(fail)?;
        let r = evaluate(&model.0, &ds.0.test).map_err(fail)?;
        match r.map {
            Some(m) => {
                *map_out = m;
                Ok(())
            }
            None => {
                set_error("no class has a positive frame");
                Err(RdStatus::NoPositives)
            }
        }
    })
}

/// Writes the T×C row-major scores of one sequence into `out` (capacity in
/// elements); `rows` and `cols` receive the shape even when the buffer is too small.
///
/// # Safety
/// Handles must be live; `out` must hold `capacity` doubles; `rows`/`cols` valid.
#[no_mangle]
pub unsafe extern "C" fn rd_model_predict(
    model: *const RdModel,
    ds: *const RdDataset,
    split: RdSplit,
    index: usize,
    out: *mut f64,
    capacity: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> RdStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if rows.is_null() || cols.is_null() {
            return Err(null("rows/cols"));
        }
        let seqs = match split {
            RdSplit::Train => &ds.0.train,
            RdSplit::Test => &ds.0.test,
        };
        let seq = seqs.get(index).ok_or_else(|| {
            set_error(format!(
                "sequence index {index} out of range for {} sequences",
                seqs.len()
            ));
            RdStatus::InvalidInput
        })?;
        check_compatible(&model.0, &ds.0).map_err(fail)?;
        let p = model.0.predict(seq).map_err(fail)?;
        *rows = p.rows();
        *cols = p.cols();
        if capacity < p.len() {
            set_error(format!(
                "buffer holds {capacity} values, {} needed",
                p.len()
            ));
            return Err(RdStatus::BufferTooSmall);
        }
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(p.data().as_ptr(), out, p.len());
        Ok(())
    })
}

unsafe fn slices<'a>(
    scores: *const f64,
    labels: *const u8,
    n: usize,
) -> Result<(&'a [f64], Vec<bool>), RdStatus> {
    if n == 0 {
        return Ok((&[], Vec::new()));
    }
    if scores.is_null() || labels.is_null() {
        return Err(null("scores/labels"));
    }
    let s = std::slice::from_raw_parts(scores, n);
    let l = std::slice::from_raw_parts(labels, n)
        .iter()
        .map(|v| *v != 0)
        .collect();
    Ok((s, l))
}

/// Average precision of `n` scores against binary labels (nonzero = positive).
///
/// # Safety
/// `scores` and `labels` must each hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rd_average_precision(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> RdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (s, l) = slices(scores, labels, n)?;
        match average_precision(s, &l) {
            Some(ap) => {
                *out = ap;
                Ok(())
            }
            None => {
                set_error("no positive labels");
                Err(RdStatus::NoPositives)
            }
        }
    })
}

/// Per-frame mAP of a row-major T×C score matrix against T×C binary labels, over
/// classes with at least one positive.
///
/// # Safety
/// `scores` and `labels` must each hold `t * c` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rd_per_frame_map(
    scores: *const f64,
    labels: *const u8,
    t: usize,
    c: usize,
    out: *mut f64,
) -> RdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if t == 0 || c == 0 {
            set_error("empty score matrix");
            return Err(RdStatus::InvalidInput);
        }
        let n = t.checked_mul(c).ok_or_else(|| {
            set_error("t * c overflows");
            RdStatus::InvalidInput
        })?;
        let (s, l) = slices(scores, labels, n)?;
        let mut grid = DenseLabelGrid::zeros(t, c);
        for (i, on) in l.iter().enumerate() {
            grid.set(i / c, i % c, *on);
        }
        let scores = Tensor::matrix(t, c, s.to_vec()).map_err(fail)?;
        let pred = Prediction::new(scores, grid).map_err(fail)?;
        match per_frame_map(&[pred]).map_err(fail)?.1 {
            Some(m) => {
                *out = m;
                Ok(())
            }
            None => {
                set_error("no class has a positive frame");
                Err(RdStatus::NoPositives)
            }
        }
    })
}
