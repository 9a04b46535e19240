//! C ABI over the `nhtb` toolkit.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `_free`. Every fallible call returns an [`NhtbStatus`]; the
//! message for the most recent failure on the calling thread is available
//! through [`nhtb_last_error`]. Panics are caught at the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nhtb::config::{preset, ExperimentConfig};
use nhtb::dyadic::{bad_probability_mc, GoodnessParams};
use nhtb::estimator::{run_experiment, RunReport};
use nhtb::output::write_run;
use nhtb::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NhtbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidParameter = 3,
    Config = 4,
    Precondition = 5,
    Numerical = 6,
    Io = 7,
    Serialization = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Experiment configuration.
pub struct NhtbConfig(ExperimentConfig);

/// Completed experiment report.
pub struct NhtbReport(RunReport);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> NhtbStatus {
    match e {
        Error::InvalidParameter { .. } => NhtbStatus::InvalidParameter,
        Error::Config { .. } => NhtbStatus::Config,
        Error::Precondition(_) | Error::Measurability(_) => NhtbStatus::Precondition,
        Error::AccretivityViolation { .. } | Error::NoValidChild { .. } | Error::WindowTooSmall(_) => {
            NhtbStatus::Numerical
        }
        Error::Io(_) => NhtbStatus::Io,
        Error::Json(_) | Error::Csv(_) => NhtbStatus::Serialization,
    }
}

fn guard(f: impl FnOnce() -> Result<(), NhtbStatus>) -> NhtbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NhtbStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            NhtbStatus::Panic
        }
    }
}

fn lift<T>(r: nhtb::Result<T>) -> Result<T, NhtbStatus> {
    r.map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

fn null() -> NhtbStatus {
    set_error("null pointer argument");
    NhtbStatus::NullPointer
}

unsafe fn str_arg<'a>(s: *const c_char) -> Result<&'a str, NhtbStatus> {
    if s.is_null() {
        return Err(null());
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        NhtbStatus::InvalidUtf8
    })
}

/// Copies `s` plus a NUL into `buf`; `needed` receives the full size.
unsafe fn copy_out(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), NhtbStatus> {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || len < n {
        set_error(format!("buffer of {len} bytes, {n} needed"));
        return Err(NhtbStatus::BufferTooSmall);
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to fit). Returns the untruncated length plus one.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn nhtb_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        e.len() + 1
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nhtb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Parses a JSON experiment config.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nhtb_config_from_json(json: *const c_char, out: *mut *mut NhtbConfig) -> NhtbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let cfg = lift(ExperimentConfig::from_json(str_arg(json)?))?;
        *out = Box::into_raw(Box::new(NhtbConfig(cfg)));
        Ok(())
    })
}

/// Loads a bundled preset by name.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nhtb_config_preset(name: *const c_char, out: *mut *mut NhtbConfig) -> NhtbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let cfg = lift(preset(str_arg(name)?))?;
        *out = Box::into_raw(Box::new(NhtbConfig(cfg)));
        Ok(())
    })
}

/// Overrides the master seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn nhtb_config_set_seed(cfg: *mut NhtbConfig, seed: u64) -> NhtbStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(null)?;
        cfg.0.seed = seed;
        Ok(())
    })
}

/// Serializes the config as JSON into `buf`.
///
/// # Safety
/// `cfg` must be a live handle; `buf` null or `len` writable bytes;
/// `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn nhtb_config_to_json(
    cfg: *const NhtbConfig,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> NhtbStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(null)?;
        copy_out(&cfg.0.to_json(), buf, len, needed)
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nhtb_config_free(cfg: *mut NhtbConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the full experiment. A report is produced even when assertions
/// fail; check [`nhtb_report_passed`].
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nhtb_run(cfg: *const NhtbConfig, out: *mut *mut NhtbReport) -> NhtbStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        let rep = lift(run_experiment(&cfg.0))?;
        *out = Box::into_raw(Box::new(NhtbReport(rep)));
        Ok(())
    })
}

/// 1 when every assertion passed, 0 otherwise (also for a null handle).
///
/// # Safety
/// `rep` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nhtb_report_passed(rep: *const NhtbReport) -> i32 {
    rep.as_ref().map_or(0, |r| r.0.passed() as i32)
}

/// Expanded pairing, its direct oracle and their relative difference.
///
/// # Safety
/// `rep` must be a live handle; each output null or writable.
#[no_mangle]
pub unsafe extern "C" fn nhtb_report_pairing(
    rep: *const NhtbReport,
    total: *mut [f64; 2],
    oracle: *mut [f64; 2],
    rel_err: *mut f64,
) -> NhtbStatus {
    guard(|| {
        let r = &rep.as_ref().ok_or_else(null)?.0;
        if let Some(t) = total.as_mut() {
            *t = r.total;
        }
        if let Some(o) = oracle.as_mut() {
            *o = r.oracle;
        }
        if let Some(e) = rel_err.as_mut() {
            *e = r.expansion_rel_err;
        }
        Ok(())
    })
}

/// Number of atoms in the measure.
///
/// # Safety
/// `rep` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nhtb_report_atoms(rep: *const NhtbReport) -> usize {
    rep.as_ref().map_or(0, |r| r.0.atoms)
}

/// Serializes the report as JSON into `buf`.
///
/// # Safety
/// As for [`nhtb_config_to_json`].
#[no_mangle]
pub unsafe extern "C" fn nhtb_report_to_json(
    rep: *const NhtbReport,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> NhtbStatus {
    guard(|| {
        let r = rep.as_ref().ok_or_else(null)?;
        copy_out(&r.0.to_json(), buf, len, needed)
    })
}

/// Writes the run artifacts selected by the config into `dir`.
///
/// # Safety
/// Handles must be live; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn nhtb_report_write(
    rep: *const NhtbReport,
    cfg: *const NhtbConfig,
    dir: *const c_char,
) -> NhtbStatus {
    guard(|| {
        let r = rep.as_ref().ok_or_else(null)?;
        let c = cfg.as_ref().ok_or_else(null)?;
        let dir = str_arg(dir)?;
        lift(write_run(Path::new(dir), &r.0, &c.0.output)).map(|_| ())
    })
}

/// # Safety
/// `rep` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nhtb_report_free(rep: *mut NhtbReport) {
    if !rep.is_null() {
        drop(Box::from_raw(rep));
    }
}

/// Monte Carlo frequency of bad cubes against the analytic bound.
///
/// # Safety
/// Outputs must be null or writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn nhtb_bad_probability(
    dim: usize,
    alpha: f64,
    d: f64,
    r: u32,
    max_excess: u32,
    trials: u64,
    seed: u64,
    frequency: *mut f64,
    bound: *mut f64,
) -> NhtbStatus {
    guard(|| {
        let p = lift(GoodnessParams::with_search(alpha, d, r, 1.0, 0.1, max_excess))?;
        let rep = lift(bad_probability_mc(dim, &p, trials, seed))?;
        if let Some(f) = frequency.as_mut() {
            *f = rep.frequency;
        }
        if let Some(b) = bound.as_mut() {
            *b = rep.analytic_bound;
        }
        Ok(())
    })
}
