//! C ABI over `liar-core`.
//!
//! Objects cross the boundary as opaque handles created by `liar_*_new` /
//! `liar_*_read` style functions and released with the matching `*_free`.
//! Every fallible function returns a [`LiarStatus`]; on failure a message is
//! available from [`liar_last_error`] on the same thread. Strings returned
//! to the caller are released with [`liar_string_free`].
//!
//! Indices are 0-based and column-major (first coordinate fastest), and
//! series values are stored frame after frame.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use liar_core::error::LiarError;
use liar_core::evaluate::{forecast, rmse};
use liar_core::fit::{box_neighborhoods, fit_all, FitReport};
use liar_core::grid::{GridSeries, Shape};
use liar_core::gts::{read_gts, write_gts};
use liar_core::kernel::{KernelField, KernelFieldJson};
use liar_core::select::{select_all, Candidates};
use liar_core::simulate::{operator_norm, random_stable_kernels, simulate_liar, NoiseSpec};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiarStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Panic = 3,
    Index = 10,
    Format = 11,
    Config = 12,
    Underdetermined = 13,
    Numerical = 14,
    Stability = 15,
    Structure = 16,
    Size = 17,
    Io = 18,
    Json = 19,
}

/// A grid time series.
pub struct LiarSeries(GridSeries);

/// Per-site kernels of a model.
pub struct LiarKernels(KernelField);

/// Per-site least-squares fits.
pub struct LiarFitReport(FitReport);

enum FfiError {
    Null(&'static str),
    Utf8,
    Core(LiarError),
}

impl From<LiarError> for FfiError {
    fn from(e: LiarError) -> Self {
        FfiError::Core(e)
    }
}

impl From<serde_json::Error> for FfiError {
    fn from(e: serde_json::Error) -> Self {
        FfiError::Core(LiarError::Json(e))
    }
}

type FfiResult<T> = Result<T, FfiError>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &LiarError) -> LiarStatus {
    match e {
        LiarError::Index(_) => LiarStatus::Index,
        LiarError::Format { .. } => LiarStatus::Format,
        LiarError::Config(_) => LiarStatus::Config,
        LiarError::Underdetermined { .. } => LiarStatus::Underdetermined,
        LiarError::Numerical(_) => LiarStatus::Numerical,
        LiarError::Stability { .. } => LiarStatus::Stability,
        LiarError::Structure(_) => LiarStatus::Structure,
        LiarError::Size(_) => LiarStatus::Size,
        LiarError::Io(_) => LiarStatus::Io,
        LiarError::Json(_) => LiarStatus::Json,
    }
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> LiarStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LiarStatus::Ok
        }
        Ok(Err(FfiError::Null(what))) => {
            set_last_error(format!("null pointer passed for {what}"));
            LiarStatus::NullPointer
        }
        Ok(Err(FfiError::Utf8)) => {
            set_last_error("string argument is not valid UTF-8".into());
            LiarStatus::InvalidUtf8
        }
        Ok(Err(FfiError::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic".into());
            LiarStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(FfiError::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or(FfiError::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(FfiError::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn string<'a>(p: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(FfiError::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| FfiError::Utf8)
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn liar_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn liar_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Copies `t_len` frames of `prod(dims)` values into a new series.
#[no_mangle]
pub unsafe extern "C" fn liar_series_new(
    dims: *const usize,
    ndim: usize,
    t_len: usize,
    values: *const f64,
    out: *mut *mut LiarSeries,
) -> LiarStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let dims = slice(dims, ndim, "dims")?.to_vec();
        let shape = Shape::new(dims)?;
        let n = shape.len().checked_mul(t_len).ok_or_else(|| LiarError::Size("series too large".into()))?;
        let values = slice(values, n, "values")?.to_vec();
        *out = Box::into_raw(Box::new(LiarSeries(GridSeries::new(shape, t_len, values)?)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn liar_series_read(path: *const c_char, out: *mut *mut LiarSeries) -> LiarStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let s = read_gts(string(path, "path")?)?;
        *out = Box::into_raw(Box::new(LiarSeries(s)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn liar_series_write(series: *const LiarSeries, path: *const c_char) -> LiarStatus {
    guard(|| {
        let s = deref(series, "series")?;
        write_gts(&s.0, string(path, "path")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn liar_series_free(series: *mut LiarSeries) {
    if !series.is_null() {
        drop(Box::from_raw(series));
    }
}

/// Number of grid dimensions, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn liar_series_ndim(series: *const LiarSeries) -> usize {
    series.as_ref().map_or(0, |s| s.0.shape().ndim())
}

/// Number of frames, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn liar_series_t_len(series: *const LiarSeries) -> usize {
    series.as_ref().map_or(0, |s| s.0.t_len())
}

/// Writes the grid dimensions into `dims`, which holds `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn liar_series_dims(series: *const LiarSeries, dims: *mut usize, capacity: usize) -> LiarStatus {
    guard(|| {
        let s = deref(series, "series")?;
        let d = s.0.shape().dims();
        if capacity < d.len() {
            return Err(LiarError::Size(format!("dims needs {} entries, got {capacity}", d.len())).into());
        }
        if dims.is_null() {
            return Err(FfiError::Null("dims"));
        }
        std::slice::from_raw_parts_mut(dims, d.len()).copy_from_slice(d);
        Ok(())
    })
}

/// Copies all values (frame after frame) into `values` of length `len`,
/// which must equal `t_len * prod(dims)`.
#[no_mangle]
pub unsafe extern "C" fn liar_series_values(series: *const LiarSeries, values: *mut f64, len: usize) -> LiarStatus {
    guard(|| {
        let s = deref(series, "series")?;
        let v = s.0.values();
        if len != v.len() {
            return Err(LiarError::Size(format!("series has {} values, buffer holds {len}", v.len())).into());
        }
        if values.is_null() {
            return Err(FfiError::Null("values"));
        }
        std::slice::from_raw_parts_mut(values, len).copy_from_slice(v);
        Ok(())
    })
}

/// Random kernels on boxes of `radius`, scaled to operator norm `target_norm`.
#[no_mangle]
pub unsafe extern "C" fn liar_kernels_random(
    dims: *const usize,
    ndim: usize,
    radius: usize,
    lags: usize,
    target_norm: f64,
    seed: u64,
    out: *mut *mut LiarKernels,
) -> LiarStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let shape = Shape::new(slice(dims, ndim, "dims")?.to_vec())?;
        let k = random_stable_kernels(&shape, radius, lags, target_norm, seed)?;
        *out = Box::into_raw(Box::new(LiarKernels(k)));
        Ok(())
    })
}

/// Parses kernel JSON (the format written by the `liar` tool).
#[no_mangle]
pub unsafe extern "C" fn liar_kernels_from_json(json: *const c_char, out: *mut *mut LiarKernels) -> LiarStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let parsed: KernelFieldJson = serde_json::from_str(string(json, "json")?)?;
        *out = Box::into_raw(Box::new(LiarKernels(KernelField::from_json(&parsed)?)));
        Ok(())
    })
}

/// Serializes kernels; free the result with `liar_string_free`.
#[no_mangle]
pub unsafe extern "C" fn liar_kernels_to_json(kernels: *const LiarKernels, out: *mut *mut c_char) -> LiarStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let k = deref(kernels, "kernels")?;
        *out = into_c_string(serde_json::to_string(&k.0.to_json())?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn liar_kernels_free(kernels: *mut LiarKernels) {
    if !kernels.is_null() {
        drop(Box::from_raw(kernels));
    }
}

/// Sum over lags of each lag operator's spectral norm.
#[no_mangle]
pub unsafe extern "C" fn liar_operator_norm(kernels: *const LiarKernels, out: *mut f64) -> LiarStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = operator_norm(&deref(kernels, "kernels")?.0)?;
        Ok(())
    })
}

/// Simulates `t_len` frames with Gaussian noise after `burn_in` steps.
#[no_mangle]
pub unsafe extern "C" fn liar_simulate(
    kernels: *const LiarKernels,
    t_len: usize,
    burn_in: usize,
    sigma: f64,
    seed: u64,
    out: *mut *mut LiarSeries,
) -> LiarStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let k = deref(kernels, "kernels")?;
        let s = simulate_liar(&k.0, t_len, burn_in, NoiseSpec::gaussian(sigma, seed))?;
        *out = Box::into_raw(Box::new(LiarSeries(s)));
        Ok(())
    })
}

/// Fits every site on a box of `radius`. Sites that cannot be identified
/// are listed in the report rather than failing the call.
#[no_mangle]
pub unsafe extern "C" fn liar_fit_box(
    series: *const LiarSeries,
    radius: usize,
    lags: usize,
    out: *mut *mut LiarFitReport,
) -> LiarStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let s = &deref(series, "series")?.0;
        let nbs = box_neighborhoods(s.shape(), &vec![radius; s.shape().ndim()])?;
        *out = Box::into_raw(Box::new(LiarFitReport(fit_all(s, &nbs, lags)?)));
        Ok(())
    })
}

/// Number of sites that failed to fit, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn liar_fit_report_failures(report: *const LiarFitReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.failures.len())
}

/// The fitted kernels; fails if any site failed.
#[no_mangle]
pub unsafe extern "C" fn liar_fit_report_kernels(report: *const LiarFitReport, out: *mut *mut LiarKernels) -> LiarStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let k = deref(report, "report")?.0.to_kernels()?;
        *out = Box::into_raw(Box::new(LiarKernels(k)));
        Ok(())
    })
}

/// Full report (coefficients, RSS, standard errors) as JSON.
#[no_mangle]
pub unsafe extern "C" fn liar_fit_report_to_json(report: *const LiarFitReport, out: *mut *mut c_char) -> LiarStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let r = deref(report, "report")?;
        *out = into_c_string(serde_json::to_string(&r.0.to_json())?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn liar_fit_report_free(report: *mut LiarFitReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// BIC selection over radii `0..=k0`. Writes each site's chosen radius
/// into `chosen` (one entry per site, linear order). A NaN `d0` selects the
/// default penalty `ln ln T`.
#[no_mangle]
pub unsafe extern "C" fn liar_select(
    series: *const LiarSeries,
    k0: usize,
    lags: usize,
    d0: f64,
    chosen: *mut usize,
    len: usize,
) -> LiarStatus {
    guard(|| {
        let s = &deref(series, "series")?.0;
        if len != s.n_sites() {
            return Err(LiarError::Size(format!("{} sites, buffer holds {len}", s.n_sites())).into());
        }
        if chosen.is_null() {
            return Err(FfiError::Null("chosen"));
        }
        let report = select_all(s, &Candidates::uniform(k0), lags, (!d0.is_nan()).then_some(d0))?;
        if let Some(f) = report.failures.first() {
            return Err(LiarError::Underdetermined {
                rows: s.t_len().saturating_sub(lags),
                cols: 0,
                context: format!("site {:?}: {}", f.site, f.message),
            }
            .into());
        }
        let out = std::slice::from_raw_parts_mut(chosen, len);
        for (o, t) in out.iter_mut().zip(&report.traces) {
            *o = t.chosen_k;
        }
        Ok(())
    })
}

/// Iterated forecast of `horizon` frames past the end of `series`.
#[no_mangle]
pub unsafe extern "C" fn liar_forecast(
    series: *const LiarSeries,
    kernels: *const LiarKernels,
    horizon: usize,
    out: *mut *mut LiarSeries,
) -> LiarStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let s = &deref(series, "series")?.0;
        let k = &deref(kernels, "kernels")?.0;
        let f = forecast(s, k, horizon)?;
        *out = Box::into_raw(Box::new(LiarSeries(f.predicted)));
        Ok(())
    })
}

/// Root mean squared difference of two arrays of length `len`.
#[no_mangle]
pub unsafe extern "C" fn liar_rmse(pred: *const f64, truth: *const f64, len: usize, out: *mut f64) -> LiarStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = rmse(slice(pred, len, "pred")?, slice(truth, len, "truth")?)?;
        Ok(())
    })
}
