//! C ABI over `spss-core`: a single-precision model handle, forward
//! inference, proportion pooling, the proportion loss, proportion
//! extraction from label maps and segmentation metrics.
//!
//! Every function returns an [`SpssStatus`]. On failure the message is
//! available from [`spss_last_error`] on the same thread until the next
//! call. Buffers are planar `channels x rows x cols`, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use spss_core::evaluate::{compute_metrics, ConfusionCounts};
use spss_core::nn::checkpoint::{self, AnyModel};
use spss_core::nn::{gap, BackboneConfig, HeadActivation, Input, ModelState, ScoreMaps};
use spss_core::objectives::loss_sp;
use spss_core::types::{LabelMode, MaskStack, ProportionVector};
use spss_core::{annotate::extract_sp, Error};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpssStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    Metrics = 6,
    Internal = 7,
}

/// Opaque model handle.
pub struct SpssModel {
    inner: ModelState<f32>,
}

/// Dataset-level scores written by [`spss_metrics`].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpssMetrics {
    pub mean_iou: f64,
    pub mean_f1: f64,
    pub mean_accuracy: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SpssStatus {
    match err {
        Error::Shape(_) | Error::ImageTooSmall { .. } => SpssStatus::ShapeMismatch,
        Error::Io { .. } | Error::OutputExists(_) => SpssStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => SpssStatus::Checkpoint,
        Error::Metrics(_) => SpssStatus::Metrics,
        _ => SpssStatus::InvalidArgument,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (SpssStatus, String)>) -> SpssStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpssStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SpssStatus::Internal
        }
    }
}

fn core<T>(r: spss_core::Result<T>) -> Result<T, (SpssStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (SpssStatus, String) {
    (SpssStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (SpssStatus, String) {
    (SpssStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (SpssStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (SpssStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (SpssStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn spss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a freshly initialised model. `n_out == 1` selects a sigmoid head,
/// larger values a softmax head.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn spss_model_new(
    in_channels: usize,
    n_out: usize,
    base_filters: usize,
    seed: u64,
    out: *mut *mut SpssModel,
) -> SpssStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = core(ModelState::<f32>::build(BackboneConfig::new(in_channels, n_out, base_filters), seed))?;
        *out = Box::into_raw(Box::new(SpssModel { inner }));
        Ok(())
    })
}

/// Loads a single-precision checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn spss_model_load(path: *const c_char, out: *mut *mut SpssModel) -> SpssStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let inner = match core(checkpoint::load_any(&path))? {
            AnyModel::F32(m) => m,
            AnyModel::F64(_) => {
                return Err((SpssStatus::Checkpoint, "double-precision checkpoints are not supported here".into()))
            }
        };
        *out = Box::into_raw(Box::new(SpssModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn spss_model_save(model: *const SpssModel, path: *const c_char) -> SpssStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path)?;
        core(checkpoint::save(&path, &model.inner))
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spss_model_free(model: *mut SpssModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output planes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn spss_model_n_out(model: *const SpssModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().n_out)
}

/// Number of trainable parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn spss_model_param_count(model: *const SpssModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.param_count())
}

/// Runs one image through the network and writes the activated score maps
/// (`n_out x rows x cols`) to `scores`, whose capacity is `scores_len`.
///
/// # Safety
/// `pixels` must hold `channels * rows * cols` values and `scores` must be
/// valid for `scores_len` writes.
#[no_mangle]
pub unsafe extern "C" fn spss_model_forward(
    model: *const SpssModel,
    pixels: *const f32,
    channels: usize,
    rows: usize,
    cols: usize,
    scores: *mut f32,
    scores_len: usize,
) -> SpssStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let px = slice(pixels, channels * rows * cols, "pixels")?;
        let n_out = model.inner.config().n_out;
        if scores_len < n_out * rows * cols {
            return Err((SpssStatus::ShapeMismatch, format!("scores holds {scores_len}, need {}", n_out * rows * cols)));
        }
        let dst = slice_mut(scores, n_out * rows * cols, "scores")?;
        let input = Input::from_planar(px, channels, rows, cols);
        let maps = core(model.inner.forward_inputs(std::slice::from_ref(&input)))?;
        dst.copy_from_slice(maps[0].values());
        Ok(())
    })
}

/// Spatial mean of each score plane, written to `rho[0..n_out]`.
///
/// # Safety
/// `scores` must hold `n_out * rows * cols` values; `rho` room for `n_out`.
#[no_mangle]
pub unsafe extern "C" fn spss_gap(scores: *const f32, n_out: usize, rows: usize, cols: usize, rho: *mut f64) -> SpssStatus {
    guard(|| {
        let src = slice(scores, n_out * rows * cols, "scores")?;
        let dst = slice_mut(rho, n_out, "rho")?;
        let activation = if n_out == 1 { HeadActivation::Sigmoid } else { HeadActivation::SoftmaxOverClasses };
        let maps = core(ScoreMaps::new(n_out, rows, cols, activation, src.to_vec()))?;
        dst.copy_from_slice(gap(&maps).values());
        Ok(())
    })
}

/// Mean squared distance between predicted and target proportions over a
/// batch of `batch` vectors of length `n_classes`.
///
/// # Safety
/// `pred` and `target` must hold `batch * n_classes` values; `loss` one.
#[no_mangle]
pub unsafe extern "C" fn spss_loss_sp(
    pred: *const f64,
    target: *const f64,
    batch: usize,
    n_classes: usize,
    loss: *mut f64,
) -> SpssStatus {
    guard(|| {
        if loss.is_null() {
            return Err(null("loss"));
        }
        if n_classes == 0 || batch == 0 {
            return Err(invalid("batch and n_classes must be positive"));
        }
        let p = slice(pred, batch * n_classes, "pred")?;
        let t = slice(target, batch * n_classes, "target")?;
        let mode = if n_classes == 1 { LabelMode::Binary } else { LabelMode::Multiclass };
        let wrap = |v: &[f64]| -> Vec<ProportionVector> {
            v.chunks(n_classes).map(|c| ProportionVector::new_unchecked(mode, c.to_vec())).collect()
        };
        *loss = core(loss_sp(&wrap(p), &wrap(t)))?;
        Ok(())
    })
}

/// Class proportions of a label map. With `n_classes == 1` the labels are
/// foreground bits; otherwise class indices below `n_classes`.
///
/// # Safety
/// `labels` must hold `rows * cols` values; `out` room for `n_classes`.
#[no_mangle]
pub unsafe extern "C" fn spss_extract_sp(
    labels: *const u8,
    rows: usize,
    cols: usize,
    n_classes: usize,
    out: *mut f64,
) -> SpssStatus {
    guard(|| {
        let l = slice(labels, rows * cols, "labels")?.to_vec();
        let dst = slice_mut(out, n_classes, "out")?;
        let mask = core(if n_classes == 1 {
            MaskStack::binary(rows, cols, l)
        } else {
            MaskStack::multiclass(n_classes, rows, cols, l)
        })?;
        dst.copy_from_slice(extract_sp(&mask).values());
        Ok(())
    })
}

/// Mean IoU, mean F1 and pixel accuracy of predicted against true labels
/// (`n_classes` classes; binary data counts as two, background and
/// foreground).
///
/// # Safety
/// `pred` and `truth` must hold `n_pixels` values; `out` one struct.
#[no_mangle]
pub unsafe extern "C" fn spss_metrics(
    pred: *const u8,
    truth: *const u8,
    n_pixels: usize,
    n_classes: usize,
    out: *mut SpssMetrics,
) -> SpssStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if n_classes < 2 {
            return Err(invalid("metrics need at least two classes"));
        }
        let p = slice(pred, n_pixels, "pred")?.to_vec();
        let t = slice(truth, n_pixels, "truth")?.to_vec();
        let pm = core(MaskStack::multiclass(n_classes, 1, n_pixels, p))?;
        let tm = core(MaskStack::multiclass(n_classes, 1, n_pixels, t))?;
        let mut acc = ConfusionCounts::new(n_classes);
        core(acc.accumulate(&pm, &tm))?;
        let names: Vec<String> = (0..n_classes).map(|j| j.to_string()).collect();
        let r = core(compute_metrics(&acc, &names, &[]))?;
        *out = SpssMetrics {
            mean_iou: r.mean_iou.mean,
            mean_f1: r.mean_f1.mean,
            mean_accuracy: r.mean_accuracy.mean,
        };
        Ok(())
    })
}
