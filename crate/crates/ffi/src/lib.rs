//! C ABI over the aspan matcher.
//!
//! Models and match sets cross the boundary as opaque pointers that the
//! caller releases with the matching `*_free` function. Every fallible call
//! returns an [`AspanStatus`]; on failure [`aspan_last_error`] describes the
//! most recent error on the calling thread. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use aspan::config::ModelConfig;
use aspan::matcher::MatchSet;
use aspan::model::Model;
use aspan::{Error, Tensor};

/// Result codes; zero is success.
#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AspanStatus {
    Ok = 0,
    NullPointer = -1,
    /// Bad shape, argument or configuration.
    Invalid = -2,
    /// Non-finite values during computation.
    Numeric = -3,
    Io = -4,
    /// Malformed weights or data files.
    Format = -5,
    /// A panic was caught at the boundary.
    Internal = -6,
}

/// Trained matcher.
pub struct AspanModel(Model);

/// Matches produced by one [`aspan_match`] call.
pub struct AspanMatchSet(MatchSet);

/// One refined correspondence; coordinates are pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AspanMatch {
    pub x_a: f64,
    pub y_a: f64,
    pub x_b: f64,
    pub y_b: f64,
    pub score: f64,
    /// Refinement heatmap variance in squared pixels.
    pub variance: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> AspanStatus {
    match e {
        Error::Numeric(_) => AspanStatus::Numeric,
        Error::Io(_) => AspanStatus::Io,
        Error::Format(_) | Error::Json(_) => AspanStatus::Format,
        _ => AspanStatus::Invalid,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (AspanStatus, String)>) -> AspanStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AspanStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AspanStatus::Internal
        }
    }
}

fn lift(e: Error) -> (AspanStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AspanStatus, String) {
    (AspanStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, (AspanStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path).to_str().map_err(|_| (AspanStatus::Invalid, "path is not UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

unsafe fn image_arg(data: *const f64, height: usize, width: usize, channels: usize) -> Result<Tensor, (AspanStatus, String)> {
    if data.is_null() {
        return Err(null("image data"));
    }
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| (AspanStatus::Invalid, "image size overflows".to_string()))?;
    let values = std::slice::from_raw_parts(data, n).to_vec();
    Tensor::new(vec![height, width, channels], values).map_err(lift)
}

/// Message for the last failed call on this thread; empty after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn aspan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aspan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads weights written by `aspan train` from the directory `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn aspan_model_load(path: *const c_char, out: *mut *mut AspanModel) -> AspanStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = Model::load(path_arg(path)?).map_err(lift)?;
        *out = Box::into_raw(Box::new(AspanModel(model)));
        Ok(())
    })
}

/// Freshly initialized model with the default configuration.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn aspan_model_new(seed: u64, out: *mut *mut AspanModel) -> AspanStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = Model::new(ModelConfig::default(), seed).map_err(lift)?;
        *out = Box::into_raw(Box::new(AspanModel(model)));
        Ok(())
    })
}

/// Writes the model's weights to the directory `path`.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn aspan_model_save(model: *const AspanModel, path: *const c_char) -> AspanStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        model.0.save(path_arg(path)?).map_err(lift)
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aspan_model_free(model: *mut AspanModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Matches two row-major `[height, width, channels]` images. Heights and
/// widths must be multiples of 8 and channels must equal the model's input
/// channels.
///
/// # Safety
/// Each image pointer must reference `height * width * channels` doubles;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aspan_match(
    model: *const AspanModel,
    image_a: *const f64,
    height_a: usize,
    width_a: usize,
    image_b: *const f64,
    height_b: usize,
    width_b: usize,
    channels: usize,
    out: *mut *mut AspanMatchSet,
) -> AspanStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let a = image_arg(image_a, height_a, width_a, channels)?;
        let b = image_arg(image_b, height_b, width_b, channels)?;
        let result = model.0.match_images(&a, &b).map_err(lift)?;
        *out = Box::into_raw(Box::new(AspanMatchSet(result.matches)));
        Ok(())
    })
}

/// Number of matches; zero for a null set.
///
/// # Safety
/// `set` must be null or come from [`aspan_match`].
#[no_mangle]
pub unsafe extern "C" fn aspan_matches_len(set: *const AspanMatchSet) -> usize {
    set.as_ref().map_or(0, |s| s.0.fine.len())
}

/// Copies match `index` into `out`.
///
/// # Safety
/// `set` must come from [`aspan_match`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aspan_matches_get(set: *const AspanMatchSet, index: usize, out: *mut AspanMatch) -> AspanStatus {
    guard(|| {
        let set = set.as_ref().ok_or_else(|| null("match set"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = set
            .0
            .fine
            .get(index)
            .ok_or_else(|| (AspanStatus::Invalid, format!("index {index} out of range for {} matches", set.0.fine.len())))?;
        *out = AspanMatch { x_a: m.x_a, y_a: m.y_a, x_b: m.x_b, y_b: m.y_b, score: m.score, variance: m.variance };
        Ok(())
    })
}

/// Writes the matches as JSON lines to `path`.
///
/// # Safety
/// `set` must come from [`aspan_match`]; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn aspan_matches_write_jsonl(set: *const AspanMatchSet, path: *const c_char) -> AspanStatus {
    guard(|| {
        let set = set.as_ref().ok_or_else(|| null("match set"))?;
        let file = File::create(path_arg(path)?).map_err(|e| lift(e.into()))?;
        set.0.write_jsonl(std::io::BufWriter::new(file)).map_err(lift)
    })
}

/// # Safety
/// `set` must come from [`aspan_match`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aspan_matches_free(set: *mut AspanMatchSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}
