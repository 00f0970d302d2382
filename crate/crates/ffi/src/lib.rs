//! C ABI for the `hevc-energy` model.
//!
//! Every fallible function returns an [`HeStatus`] and writes its result
//! through an out pointer. On failure the out pointer is left untouched and
//! [`he_last_error_message`] describes the problem. Objects are opaque
//! handles; release each one with the matching `*_free` call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hevc_energy::calibration::{fit_coeff_energy, fit_value_energy, ValueRange};
use hevc_energy::measurement::{integrate_power_log, PowerLog, Sample};
use hevc_energy::model::{estimate, relative_error, ModelKind};
use hevc_energy::trace::{aggregate_trace_file, FieldPolicy};
use hevc_energy::{builtin_constants, EnergyConstants, Error, FeatureCounts};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeStatus {
    Ok = 0,
    /// Malformed or invalid input (parse errors, validation failures).
    Validation = 1,
    /// Numeric failure: nonpositive measurement, degenerate or
    /// unidentifiable fit.
    Numeric = 2,
    /// A file could not be read.
    Io = 3,
    /// A required pointer argument was null.
    NullPointer = 4,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 5,
    /// The library panicked; this is a bug.
    Panic = 6,
}

/// Model selector for [`he_estimate`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeModel {
    Accurate = 0,
    Simplified = 1,
}

/// Opaque set of energy constants.
pub struct HeConstants {
    inner: EnergyConstants,
}

/// Opaque aggregated bitstream features.
pub struct HeFeatures {
    inner: FeatureCounts,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let clean = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = clean);
}

struct Failure(HeStatus, String);

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let status = match err.exit_code() {
            1 => HeStatus::Validation,
            2 => HeStatus::Numeric,
            _ => HeStatus::Io,
        };
        Failure(status, err.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(HeStatus::NullPointer, format!("{what} is null"))
}

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> HeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error("");
            HeStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            HeStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(HeStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn path_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    str_arg(ptr, what).map(Path::new)
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Message describing the last failure on the calling thread, or an empty
/// string after a successful call. The pointer stays valid until the next
/// call into this library on the same thread.
#[no_mangle]
pub extern "C" fn he_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn he_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a handle holding the built-in constants.
///
/// # Safety
/// `out` must be null or valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn he_constants_builtin(out: *mut *mut HeConstants) -> HeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        out.write(boxed(HeConstants { inner: builtin_constants() }));
        Ok(())
    })
}

/// Loads a constants profile from a `key = value` text file.
///
/// # Safety
/// `path` must be null or a NUL-terminated string. `out` must be null or
/// valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn he_constants_load(path: *const c_char, out: *mut *mut HeConstants) -> HeStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = EnergyConstants::load(path)?;
        out.write(boxed(HeConstants { inner }));
        Ok(())
    })
}

/// Reads one constant by its profile key (for example `e_tsf` or
/// `e_mode_depth.dc.2`).
///
/// # Safety
/// `constants` must be null or a live handle, `key` null or a
/// NUL-terminated string, `out` null or valid for writing one double.
#[no_mangle]
pub unsafe extern "C" fn he_constants_get(
    constants: *const HeConstants,
    key: *const c_char,
    out: *mut f64,
) -> HeStatus {
    guard(|| {
        let k = constants.as_ref().ok_or_else(|| null("constants"))?;
        let key = str_arg(key, "key")?;
        let value = k
            .inner
            .entries()
            .into_iter()
            .find(|(name, _)| name == key)
            .map(|(_, v)| v)
            .ok_or_else(|| Failure(HeStatus::Validation, format!("unknown constant `{key}`")))?;
        write_out(out, value, "out")
    })
}

/// Releases a constants handle. Null is ignored.
///
/// # Safety
/// `constants` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn he_constants_free(constants: *mut HeConstants) {
    if !constants.is_null() {
        drop(Box::from_raw(constants));
    }
}

/// Aggregates a feature trace file. With `lenient` nonzero, unknown record
/// fields are skipped instead of rejected.
///
/// # Safety
/// `path` must be null or a NUL-terminated string. `out` must be null or
/// valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn he_features_from_trace(
    path: *const c_char,
    lenient: i32,
    out: *mut *mut HeFeatures,
) -> HeStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let policy = if lenient != 0 { FieldPolicy::Lenient } else { FieldPolicy::Strict };
        let (inner, _) = aggregate_trace_file(path, policy)?;
        out.write(boxed(HeFeatures { inner }));
        Ok(())
    })
}

/// Number of prediction units in the aggregated features.
///
/// # Safety
/// `features` must be null or a live handle, `out` null or valid for
/// writing one integer.
#[no_mangle]
pub unsafe extern "C" fn he_features_units(features: *const HeFeatures, out: *mut u64) -> HeStatus {
    guard(|| {
        let f = features.as_ref().ok_or_else(|| null("features"))?;
        write_out(out, f.inner.n_units(), "out")
    })
}

/// Releases a features handle. Null is ignored.
///
/// # Safety
/// `features` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn he_features_free(features: *mut HeFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// Estimated decoding energy in joules.
///
/// # Safety
/// Handles must be null or live, `out_joules` null or valid for writing one
/// double.
#[no_mangle]
pub unsafe extern "C" fn he_estimate(
    features: *const HeFeatures,
    constants: *const HeConstants,
    model: HeModel,
    out_joules: *mut f64,
) -> HeStatus {
    guard(|| {
        let f = features.as_ref().ok_or_else(|| null("features"))?;
        let k = constants.as_ref().ok_or_else(|| null("constants"))?;
        let kind = match model {
            HeModel::Accurate => ModelKind::Accurate,
            HeModel::Simplified => ModelKind::Simplified,
        };
        write_out(out_joules, estimate(&f.inner, &k.inner, kind).total, "out_joules")
    })
}

/// Relative estimation error `|measured − estimated| / measured`.
///
/// # Safety
/// `out` must be null or valid for writing one double.
#[no_mangle]
pub unsafe extern "C" fn he_relative_error(measured: f64, estimated: f64, out: *mut f64) -> HeStatus {
    guard(|| write_out(out, relative_error(measured, estimated)?, "out"))
}

/// Integrates a current log (`len` samples of time in seconds and current
/// in amperes) into supply energy, corrected for the shunt dissipation.
///
/// # Safety
/// `times` and `currents` must each be null or point to `len` doubles.
/// `out_joules` must be null or valid for writing one double.
#[no_mangle]
pub unsafe extern "C" fn he_integrate_power(
    times: *const f64,
    currents: *const f64,
    len: usize,
    v0_volts: f64,
    shunt_ohms: f64,
    out_joules: *mut f64,
) -> HeStatus {
    guard(|| {
        if times.is_null() {
            return Err(null("times"));
        }
        if currents.is_null() {
            return Err(null("currents"));
        }
        let t = std::slice::from_raw_parts(times, len);
        let i = std::slice::from_raw_parts(currents, len);
        let samples = t.iter().zip(i).map(|(&t, &i)| Sample { t, i }).collect();
        let log = PowerLog::new(samples, v0_volts, shunt_ohms)?;
        write_out(out_joules, integrate_power_log(&log)?, "out_joules")
    })
}

/// Least-squares line through `(n_coeff, energy)` points. The slope is the
/// per-coefficient energy.
///
/// # Safety
/// `counts` and `energies` must each be null or point to `len` elements.
/// The out pointers must be null or valid for writing one double.
#[no_mangle]
pub unsafe extern "C" fn he_fit_coeff_energy(
    counts: *const u64,
    energies: *const f64,
    len: usize,
    out_slope: *mut f64,
    out_intercept: *mut f64,
) -> HeStatus {
    guard(|| {
        if counts.is_null() || energies.is_null() {
            return Err(null("input array"));
        }
        if out_slope.is_null() || out_intercept.is_null() {
            return Err(null("out pointer"));
        }
        let points: Vec<(u64, f64)> = std::slice::from_raw_parts(counts, len)
            .iter()
            .copied()
            .zip(std::slice::from_raw_parts(energies, len).iter().copied())
            .collect();
        let fit = fit_coeff_energy(&points)?;
        out_slope.write(fit.slope);
        out_intercept.write(fit.intercept);
        Ok(())
    })
}

/// Least-squares line through `(log2|value|, energy)` points. Values with
/// magnitude 256 or more are skipped unless `all_values` is nonzero.
///
/// # Safety
/// `values` and `energies` must each be null or point to `len` elements.
/// The out pointers must be null or valid for writing one double.
#[no_mangle]
pub unsafe extern "C" fn he_fit_value_energy(
    values: *const i64,
    energies: *const f64,
    len: usize,
    all_values: i32,
    out_slope: *mut f64,
    out_intercept: *mut f64,
) -> HeStatus {
    guard(|| {
        if values.is_null() || energies.is_null() {
            return Err(null("input array"));
        }
        if out_slope.is_null() || out_intercept.is_null() {
            return Err(null("out pointer"));
        }
        let points: Vec<(i64, f64)> = std::slice::from_raw_parts(values, len)
            .iter()
            .copied()
            .zip(std::slice::from_raw_parts(energies, len).iter().copied())
            .collect();
        let range = if all_values != 0 { ValueRange::All } else { ValueRange::Below256 };
        let fit = fit_value_energy(&points, range)?;
        out_slope.write(fit.slope);
        out_intercept.write(fit.intercept);
        Ok(())
    })
}
