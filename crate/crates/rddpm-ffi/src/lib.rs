//! C ABI over the diffusion anomaly-segmentation library.
//!
//! The surface is deliberately small: load a trained checkpoint into an
//! opaque model handle, score images into caller-owned buffers, and
//! compute the two ranking metrics. Every entry point returns an
//! [`RddpmStatus`]; on failure a thread-local message with the details is
//! readable through [`rddpm_last_error`]. Panics are caught at the
//! boundary and reported as [`RddpmStatus::Panic`] rather than unwinding
//! into foreign frames.
//!
//! Memory rules: the library never frees caller buffers, callers must
//! free every model through [`rddpm_model_free`], and output buffers must
//! be at least as large as each function documents.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rddpm::core::{ImageTensor, RngState};
use rddpm::metrics::{auprc, auroc};
use rddpm::model::RefNet;
use rddpm::schedule::{linear_schedule, NoiseSchedule};
use rddpm::segmentation::segment_averaged;
use rddpm::trainer::load_checkpoint;
use rddpm::Error;

/// Result code of every C entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RddpmStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument value was rejected (shape, range, or state).
    InvalidArgument = 2,
    /// The operating system reported an I/O failure.
    Io = 3,
    /// A file exists but does not hold what it should.
    BadFormat = 4,
    /// The requested statistic is undefined on this input.
    UndefinedMetric = 5,
    /// A numeric failure (non-finite loss) aborted the operation.
    NumericFailure = 6,
    /// A panic was caught at the language boundary.
    Panic = 7,
}

/// A loaded noise predictor plus the diffusion schedule it was trained
/// with. Create with [`rddpm_model_load`], release with
/// [`rddpm_model_free`].
pub struct RddpmModel {
    net: RefNet,
    schedule: NoiseSchedule,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").expect("empty is valid"));
}

fn set_error(message: &str) {
    let sanitized: String = message.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("nul bytes removed");
    });
}

fn fail(status: RddpmStatus, message: &str) -> RddpmStatus {
    set_error(message);
    status
}

fn fail_error(error: &Error) -> RddpmStatus {
    let status = match error {
        Error::InvalidArgument(_) => RddpmStatus::InvalidArgument,
        Error::Io { .. } => RddpmStatus::Io,
        Error::Image { .. } | Error::Format { .. } => RddpmStatus::BadFormat,
        Error::UndefinedMetric(_) => RddpmStatus::UndefinedMetric,
        Error::NanLoss { .. } => RddpmStatus::NumericFailure,
    };
    fail(status, &error.to_string())
}

fn guard(body: impl FnOnce() -> RddpmStatus) -> RddpmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => {
            if status == RddpmStatus::Ok {
                set_error("");
            }
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".to_string());
            fail(RddpmStatus::Panic, &format!("caught panic: {message}"))
        }
    }
}

/// Returns the library version as a static NUL-terminated string; never
/// null, never freed by the caller.
#[no_mangle]
pub extern "C" fn rddpm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the message of the calling thread's most recent failure into
/// `buffer` (NUL-terminated, truncated to `capacity`) and returns the
/// length the full message needs, including the terminator. A null
/// `buffer` or zero `capacity` only queries that length. Successful calls
/// clear the message.
///
/// # Safety
/// `buffer`, when non-null, must point to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rddpm_last_error(buffer: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        let bytes = message.as_bytes_with_nul();
        if !buffer.is_null() && capacity > 0 {
            let copied = bytes.len().min(capacity);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buffer.cast(), copied);
            // Guarantee termination even when truncating.
            *buffer.add(copied - 1) = 0;
        }
        bytes.len()
    })
}

/// Loads a training checkpoint from `path` and stores a model handle in
/// `out_model`. The handle owns its memory; pass it to
/// [`rddpm_model_free`] when done.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rddpm_model_load(
    path: *const c_char,
    out_model: *mut *mut RddpmModel,
) -> RddpmStatus {
    guard(|| {
        if path.is_null() || out_model.is_null() {
            return fail(RddpmStatus::NullArgument, "path and out_model must be non-null");
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(s) => Path::new(s),
            Err(_) => return fail(RddpmStatus::InvalidArgument, "path is not valid UTF-8"),
        };
        let ckpt = match load_checkpoint(path) {
            Ok(c) => c,
            Err(e) => return fail_error(&e),
        };
        let net = match RefNet::from_params(&ckpt.model, &ckpt.params) {
            Ok(n) => n,
            Err(e) => return fail_error(&e),
        };
        let schedule = match linear_schedule(
            ckpt.config.t_steps,
            ckpt.config.beta_start,
            ckpt.config.beta_end,
        ) {
            Ok(s) => s,
            Err(e) => return fail_error(&e),
        };
        *out_model = Box::into_raw(Box::new(RddpmModel { net, schedule }));
        RddpmStatus::Ok
    })
}

/// Releases a model handle. A null handle is a no-op.
///
/// # Safety
/// `model` must be null or a pointer obtained from [`rddpm_model_load`]
/// that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn rddpm_model_free(model: *mut RddpmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the image channel count the model expects to `out_channels`.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rddpm_model_channels(
    model: *const RddpmModel,
    out_channels: *mut usize,
) -> RddpmStatus {
    guard(|| {
        if model.is_null() || out_channels.is_null() {
            return fail(RddpmStatus::NullArgument, "model and out_channels must be non-null");
        }
        *out_channels = (*model).net.config().channels;
        RddpmStatus::Ok
    })
}

/// Writes the model's trainable parameter count to `out_count`.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rddpm_model_param_count(
    model: *const RddpmModel,
    out_count: *mut usize,
) -> RddpmStatus {
    guard(|| {
        if model.is_null() || out_count.is_null() {
            return fail(RddpmStatus::NullArgument, "model and out_count must be non-null");
        }
        *out_count = (*model).net.config().param_count();
        RddpmStatus::Ok
    })
}

/// Scores one image: partially noises it, denoises it back `repeats`
/// times, and writes the per-pixel anomaly scores (mean absolute
/// reconstruction difference across channels, averaged over repeats) to
/// `out_scores` in row-major order.
///
/// `pixels` holds `channels * height * width` values in channel-major
/// order (all of channel 0, then channel 1, ...) on the [-1, 1] intensity
/// scale; `out_scores` receives `height * width` values. Equal inputs and
/// `seed` reproduce bit-identical scores, and match the `segment`
/// command's raw output for the same checkpoint and settings.
///
/// # Safety
/// `model`, `pixels`, and `out_scores` must be valid for the documented
/// lengths.
#[no_mangle]
pub unsafe extern "C" fn rddpm_segment(
    model: *const RddpmModel,
    pixels: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    noising_fraction: f64,
    repeats: usize,
    seed: u64,
    out_scores: *mut f32,
) -> RddpmStatus {
    guard(|| {
        if model.is_null() || pixels.is_null() || out_scores.is_null() {
            return fail(
                RddpmStatus::NullArgument,
                "model, pixels, and out_scores must be non-null",
            );
        }
        let model = &*model;
        if channels != model.net.config().channels {
            return fail(
                RddpmStatus::InvalidArgument,
                &format!(
                    "image has {channels} channels but the model expects {}",
                    model.net.config().channels
                ),
            );
        }
        let len = channels.checked_mul(height).and_then(|v| v.checked_mul(width));
        let Some(len) = len else {
            return fail(RddpmStatus::InvalidArgument, "image dimensions overflow");
        };
        let data = std::slice::from_raw_parts(pixels, len).to_vec();
        let image = match ImageTensor::from_data(channels, height, width, data) {
            Ok(t) => t,
            Err(e) => return fail_error(&e),
        };
        let rng = RngState::from_seed(seed).split("segment");
        let heatmap = match segment_averaged(
            &image,
            &model.net,
            &model.schedule,
            noising_fraction,
            repeats,
            &rng,
        ) {
            Ok(h) => h,
            Err(e) => return fail_error(&e),
        };
        std::ptr::copy_nonoverlapping(heatmap.scores().as_ptr(), out_scores, height * width);
        RddpmStatus::Ok
    })
}

unsafe fn ranking_inputs<'a>(
    scores: *const f64,
    labels: *const u8,
    len: usize,
) -> Result<(&'a [f64], &'a [u8]), RddpmStatus> {
    if scores.is_null() || labels.is_null() {
        return Err(fail(RddpmStatus::NullArgument, "scores and labels must be non-null"));
    }
    Ok((std::slice::from_raw_parts(scores, len), std::slice::from_raw_parts(labels, len)))
}

/// Computes pixel AUROC over `len` scored pixels with binary labels
/// (1 = anomalous) and writes it to `out_value`.
///
/// # Safety
/// `scores` and `labels` must hold `len` readable elements and
/// `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rddpm_auroc(
    scores: *const f64,
    labels: *const u8,
    len: usize,
    out_value: *mut f64,
) -> RddpmStatus {
    guard(|| {
        if out_value.is_null() {
            return fail(RddpmStatus::NullArgument, "out_value must be non-null");
        }
        let (scores, labels) = match ranking_inputs(scores, labels, len) {
            Ok(pair) => pair,
            Err(status) => return status,
        };
        match auroc(scores, labels) {
            Ok(v) => {
                *out_value = v;
                RddpmStatus::Ok
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Computes pixel AUPRC (average precision) over `len` scored pixels with
/// binary labels and writes it to `out_value`.
///
/// # Safety
/// `scores` and `labels` must hold `len` readable elements and
/// `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rddpm_auprc(
    scores: *const f64,
    labels: *const u8,
    len: usize,
    out_value: *mut f64,
) -> RddpmStatus {
    guard(|| {
        if out_value.is_null() {
            return fail(RddpmStatus::NullArgument, "out_value must be non-null");
        }
        let (scores, labels) = match ranking_inputs(scores, labels, len) {
            Ok(pair) => pair,
            Err(status) => return status,
        };
        match auprc(scores, labels) {
            Ok(v) => {
                *out_value = v;
                RddpmStatus::Ok
            }
            Err(e) => fail_error(&e),
        }
    })
}
