//! C interface to `puseg`.
//!
//! Every function returns a [`PusegStatus`]. On failure the message is kept
//! per thread and can be read with [`puseg_last_error`]. Images are passed
//! as row-major `height * width` buffers; feature stacks as row-major
//! `height * width * feature_dim`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::Array2;
use puseg::data::{build_heatmap, ImageSample, Pixel};
use puseg::net::SegModel;
use puseg::pipeline::{run_pipeline, RunConfig};
use puseg::pu::{pu_risk, FeatureMatrix, PuHead, PuProblem, PuScoreMap, Surrogate};
use puseg::{eval, pseudo, Error};

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PusegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Io = 5,
    Checkpoint = 6,
    Runtime = 7,
    Panic = 8,
}

/// A trained segmentation model. Opaque to C.
pub struct PusegModel {
    inner: SegModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(PusegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::Prior { .. } => PusegStatus::Config,
            Error::Shape(_) => PusegStatus::Shape,
            Error::Io(_) | Error::Image(_) | Error::Json(_) => PusegStatus::Io,
            Error::Checkpoint(_) => PusegStatus::Checkpoint,
            Error::InvalidData(_) | Error::MissingAnnotation(_) | Error::Split(_) => PusegStatus::InvalidArgument,
            _ => PusegStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PusegStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(PusegStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PusegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PusegStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside puseg".into());
            PusegStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn path<'a>(ptr: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(ptr).to_str().map_err(|_| invalid(format!("`{what}` is not UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn model<'a>(ptr: *const PusegModel) -> Result<&'a SegModel, Failure> {
    ptr.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

fn pixel_count(height: usize, width: usize) -> Result<usize, Failure> {
    if height == 0 || width == 0 {
        return Err(invalid("image dimensions must be positive"));
    }
    height.checked_mul(width).ok_or_else(|| invalid("image too large"))
}

unsafe fn image(pixels: *const f32, height: usize, width: usize) -> Result<ImageSample, Failure> {
    let n = pixel_count(height, width)?;
    let data = slice(pixels, n, "pixels")?.to_vec();
    let arr = Array2::from_shape_vec((height, width), data).map_err(|e| invalid(e.to_string()))?;
    let sample = ImageSample::new("ffi", arr);
    sample.validate()?;
    Ok(sample)
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn puseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn puseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file. Release the model with [`puseg_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn puseg_model_load(path_ptr: *const c_char, out_model: *mut *mut PusegModel) -> PusegStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        *slot = std::ptr::null_mut();
        let inner = SegModel::load(path(path_ptr, "path")?)?;
        *slot = Box::into_raw(Box::new(PusegModel { inner }));
        Ok(())
    })
}

/// Frees a model returned by [`puseg_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`puseg_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn puseg_model_free(model: *mut PusegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out_dim` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn puseg_model_feature_dim(model_ptr: *const PusegModel, out_dim: *mut usize) -> PusegStatus {
    guard(|| {
        *out(out_dim, "out_dim")? = model(model_ptr)?.feature_dim();
        Ok(())
    })
}

/// Writes per-pixel foreground confidence into `out_conf` (`height * width`).
///
/// # Safety
/// Buffers must hold `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn puseg_model_predict(
    model_ptr: *const PusegModel,
    pixels: *const f32,
    height: usize,
    width: usize,
    out_conf: *mut f32,
) -> PusegStatus {
    guard(|| {
        let m = model(model_ptr)?;
        let sample = image(pixels, height, width)?;
        let dst = slice_mut(out_conf, height * width, "out_conf")?;
        for (d, v) in dst.iter_mut().zip(m.predict(&sample).values.iter()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Writes the feature stack into `out_features` (`height * width * feature_dim`).
///
/// # Safety
/// `pixels` must hold `height * width` elements and `out_features`
/// `height * width * feature_dim`.
#[no_mangle]
pub unsafe extern "C" fn puseg_model_extract_features(
    model_ptr: *const PusegModel,
    pixels: *const f32,
    height: usize,
    width: usize,
    out_features: *mut f32,
) -> PusegStatus {
    guard(|| {
        let m = model(model_ptr)?;
        let sample = image(pixels, height, width)?;
        let n = height * width * m.feature_dim();
        let dst = slice_mut(out_features, n, "out_features")?;
        for (d, v) in dst.iter_mut().zip(m.extract_features(&sample).vectors.iter()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Non-negative PU risk of a linear head with the sigmoid surrogate. The
/// prior is `n_p / (n_p + n_u)`. Feature matrices are row-major with `dim`
/// columns.
///
/// # Safety
/// `positive` must hold `n_p * dim` values, `unlabeled` `n_u * dim` and
/// `weights` `dim`.
#[no_mangle]
pub unsafe extern "C" fn puseg_pu_risk(
    positive: *const f64,
    n_p: usize,
    unlabeled: *const f64,
    n_u: usize,
    dim: usize,
    weights: *const f64,
    bias: f64,
    out_risk: *mut f64,
) -> PusegStatus {
    guard(|| {
        if dim == 0 {
            return Err(invalid("feature dimension must be positive"));
        }
        let dst = out(out_risk, "out_risk")?;
        let p = FeatureMatrix::new(dim, slice(positive, n_p * dim, "positive")?.to_vec())?;
        let u = FeatureMatrix::new(dim, slice(unlabeled, n_u * dim, "unlabeled")?.to_vec())?;
        let problem = PuProblem::new(p, u)?;
        let head = PuHead {
            weights: slice(weights, dim, "weights")?.to_vec(),
            bias,
            image_id: String::new(),
        };
        *dst = pu_risk(&head, &problem, Surrogate::Sigmoid)?;
        Ok(())
    })
}

/// Selects the lower `alpha` percent of `scores`. Writes the chosen
/// positions in ascending order to `out_indices` (capacity `n`) and their
/// number to `out_count`.
///
/// # Safety
/// `scores` and `out_indices` must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn puseg_select_pu_negatives(
    scores: *const f64,
    n: usize,
    alpha: f64,
    out_indices: *mut usize,
    out_count: *mut usize,
) -> PusegStatus {
    guard(|| {
        let count = out(out_count, "out_count")?;
        let values = slice(scores, n, "scores")?;
        let map = PuScoreMap {
            image_id: "ffi".into(),
            scores: values.iter().enumerate().map(|(i, &s)| ((0, i), s)).collect::<BTreeMap<Pixel, f64>>(),
        };
        let chosen = puseg::pu::select_pu_negatives(&map, alpha)?;
        let dst = slice_mut(out_indices, n, "out_indices")?;
        for (d, (_, i)) in dst.iter_mut().zip(&chosen) {
            *d = *i;
        }
        *count = chosen.len();
        Ok(())
    })
}

/// Dice overlap of two binary masks; nonzero counts as foreground.
///
/// # Safety
/// `pred` and `gt` must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn puseg_dice(pred: *const u8, gt: *const u8, n: usize, out_dice: *mut f64) -> PusegStatus {
    guard(|| {
        let dst = out(out_dice, "out_dice")?;
        let p = Array2::from_shape_vec((1, n), slice(pred, n, "pred")?.to_vec()).map_err(|e| invalid(e.to_string()))?;
        let g = Array2::from_shape_vec((1, n), slice(gt, n, "gt")?.to_vec()).map_err(|e| invalid(e.to_string()))?;
        *dst = eval::dice(&p, &g)?;
        Ok(())
    })
}

/// Renders a centerline heatmap into `out_heatmap` (`height * width`).
///
/// # Safety
/// `rows` and `cols` must hold `n_points` elements.
#[no_mangle]
pub unsafe extern "C" fn puseg_build_heatmap(
    rows: *const usize,
    cols: *const usize,
    n_points: usize,
    height: usize,
    width: usize,
    sigma: f64,
    out_heatmap: *mut f64,
) -> PusegStatus {
    guard(|| {
        let n = pixel_count(height, width)?;
        let r = slice(rows, n_points, "rows")?;
        let c = slice(cols, n_points, "cols")?;
        let points: Vec<Pixel> = r.iter().copied().zip(c.iter().copied()).collect();
        let target = build_heatmap(&points, (height, width), sigma)?;
        let dst = slice_mut(out_heatmap, n, "out_heatmap")?;
        for (d, v) in dst.iter_mut().zip(target.values.iter()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Thresholds a confidence map. `out_labels` receives `1` for positives,
/// `0` for negatives and `-1` for unlabeled pixels.
///
/// # Safety
/// `conf` and `out_labels` must hold `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn puseg_select_by_confidence(
    conf: *const f32,
    height: usize,
    width: usize,
    th_p: f64,
    th_n: f64,
    out_labels: *mut i8,
) -> PusegStatus {
    guard(|| {
        let n = pixel_count(height, width)?;
        let values = Array2::from_shape_vec((height, width), slice(conf, n, "conf")?.to_vec())
            .map_err(|e| invalid(e.to_string()))?;
        let map = puseg::net::ConfidenceMap {
            image_id: "ffi".into(),
            values,
        };
        let set = pseudo::select_by_confidence(&map, th_p, th_n)?;
        let dst = slice_mut(out_labels, n, "out_labels")?;
        dst.fill(-1);
        for (r, c) in &set.positives {
            dst[r * width + c] = 1;
        }
        for (r, c) in &set.negatives {
            dst[r * width + c] = 0;
        }
        Ok(())
    })
}

/// Runs every stage for the config file at `config_path` and writes the
/// final test score (mean Dice or average coverage) to `out_score`.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn puseg_run_pipeline(config_path: *const c_char, out_score: *mut f64) -> PusegStatus {
    guard(|| {
        let dst = out(out_score, "out_score")?;
        let config = RunConfig::load(path(config_path, "config_path")?)?;
        let outcome = run_pipeline(&config)?;
        let metrics = outcome
            .metrics
            .ok_or_else(|| Failure(PusegStatus::Runtime, "pipeline produced no metrics".into()))?;
        *dst = metrics.score();
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_are_per_call() {
        let mut d = 0.0;
        let status = unsafe { puseg_dice(std::ptr::null(), std::ptr::null(), 3, &mut d) };
        assert_eq!(status, PusegStatus::NullPointer);
        assert!(!puseg_last_error().is_null());
        let a = [1u8, 0, 1];
        let status = unsafe { puseg_dice(a.as_ptr(), a.as_ptr(), 3, &mut d) };
        assert_eq!(status, PusegStatus::Ok);
        assert!(puseg_last_error().is_null());
        assert_eq!(d, 1.0);
    }

    #[test]
    fn version_is_c_string() {
        let v = unsafe { CStr::from_ptr(puseg_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
