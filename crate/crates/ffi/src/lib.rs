//! C ABI over `emgps-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` /
//! `*_default` functions and released by the matching `*_free`. Every fallible
//! function returns an [`EmgpsStatus`]; on failure the message is available
//! from [`emgps_last_error_message`] until the next failing call on the same
//! thread. Strings returned through out-parameters are owned by the caller
//! and released with [`emgps_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use emgps_core::error::Error;
use emgps_core::harness::{compare_variants, run_pipeline, ExperimentConfig};
use emgps_core::policy::{mlp_forward, GlobalPolicy};
use nalgebra::DVector;

/// Result codes. `EMGPS_STATUS_OK` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmgpsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Domain = 3,
    Config = 4,
    Dimension = 5,
    Numerical = 6,
    Fit = 7,
    InformationBound = 8,
    NonFiniteLoss = 9,
    Missing = 10,
    Io = 11,
    Json = 12,
    Csv = 13,
    Panic = 14,
}

impl From<&Error> for EmgpsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Domain(_) => Self::Domain,
            Error::Config(_) => Self::Config,
            Error::Dimension(_) => Self::Dimension,
            Error::Numerical(_) => Self::Numerical,
            Error::Fit { .. } => Self::Fit,
            Error::InformationBound { .. } => Self::InformationBound,
            Error::NonFiniteLoss { .. } => Self::NonFiniteLoss,
            Error::Missing(_) => Self::Missing,
            Error::Io(_) => Self::Io,
            Error::Json(_) => Self::Json,
            Error::Csv(_) => Self::Csv,
        }
    }
}

/// Opaque experiment configuration.
pub struct EmgpsConfig(ExperimentConfig);

/// Opaque trained global policy.
pub struct EmgpsPolicy(GlobalPolicy);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(EmgpsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> EmgpsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EmgpsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            EmgpsStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(EmgpsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(EmgpsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = CString::new(s)
        .map_err(|_| Failure(EmgpsStatus::Json, "string contains NUL".into()))?
        .into_raw();
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn emgps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn emgps_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn emgps_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn emgps_config_default(out: *mut *mut EmgpsConfig) -> EmgpsStatus {
    guard(|| write_out(out, EmgpsConfig(ExperimentConfig::default())))
}

/// Parses a JSON configuration; omitted fields take their defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emgps_config_from_json(
    json: *const c_char,
    out: *mut *mut EmgpsConfig,
) -> EmgpsStatus {
    guard(|| {
        let cfg: ExperimentConfig =
            serde_json::from_str(str_arg(json, "json")?).map_err(Error::from)?;
        cfg.validate()?;
        write_out(out, EmgpsConfig(cfg))
    })
}

/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emgps_config_to_json(
    cfg: *const EmgpsConfig,
    out: *mut *mut c_char,
) -> EmgpsStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        write_string(out, serde_json::to_string(&cfg.0).map_err(Error::from)?)
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn emgps_config_set_seed(cfg: *mut EmgpsConfig, seed: u64) -> EmgpsStatus {
    guard(|| {
        cfg.as_mut().ok_or_else(|| null("config"))?.0.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn emgps_config_free(cfg: *mut EmgpsConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the full pipeline into `out_dir`.
///
/// # Safety
/// `cfg` must be a live handle and `out_dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn emgps_run_pipeline(
    cfg: *const EmgpsConfig,
    out_dir: *const c_char,
) -> EmgpsStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        run_pipeline(&cfg.0, &PathBuf::from(str_arg(out_dir, "out_dir")?))?;
        Ok(())
    })
}

/// Compares the baseline snapshot with snapshot `snapshot` (the last one when
/// negative) and writes the report as JSON to `report_json`.
///
/// # Safety
/// `cfg` must be a live handle, `out_dir` a NUL-terminated path and
/// `report_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emgps_compare(
    cfg: *const EmgpsConfig,
    out_dir: *const c_char,
    snapshot: i64,
    report_json: *mut *mut c_char,
) -> EmgpsStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        let snapshot = usize::try_from(snapshot).ok();
        let report = compare_variants(
            &cfg.0,
            &PathBuf::from(str_arg(out_dir, "out_dir")?),
            snapshot,
        )?;
        write_string(
            report_json,
            serde_json::to_string(&report).map_err(Error::from)?,
        )
    })
}

/// # Safety
/// `path` must be a NUL-terminated path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emgps_policy_load(
    path: *const c_char,
    out: *mut *mut EmgpsPolicy,
) -> EmgpsStatus {
    guard(|| {
        let policy = GlobalPolicy::load(&PathBuf::from(str_arg(path, "path")?))?;
        write_out(out, EmgpsPolicy(policy))
    })
}

/// Number of steps; 0 for a NULL handle.
///
/// # Safety
/// `policy` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn emgps_policy_horizon(policy: *const EmgpsPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.0.covariances.len())
}

/// # Safety
/// `policy` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn emgps_policy_state_dim(policy: *const EmgpsPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.0.net.input_dim())
}

/// # Safety
/// `policy` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn emgps_policy_action_dim(policy: *const EmgpsPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.0.net.output_dim())
}

/// Mean action μ^L(x) for `state` (length `state_len`) into `action`
/// (length `action_len`).
///
/// # Safety
/// `policy` must be a live handle; `state` and `action` must point to arrays
/// of the given lengths.
#[no_mangle]
pub unsafe extern "C" fn emgps_policy_action_mean(
    policy: *const EmgpsPolicy,
    state: *const f64,
    state_len: usize,
    action: *mut f64,
    action_len: usize,
) -> EmgpsStatus {
    guard(|| {
        let p = handle(policy, "policy")?;
        if state.is_null() || action.is_null() {
            return Err(null("state or action buffer"));
        }
        if state_len != p.0.net.input_dim() || action_len != p.0.net.output_dim() {
            return Err(Error::Dimension(format!(
                "buffers of {state_len} and {action_len} for a {}→{} policy",
                p.0.net.input_dim(),
                p.0.net.output_dim()
            ))
            .into());
        }
        let x = DVector::from_column_slice(std::slice::from_raw_parts(state, state_len));
        let mu = mlp_forward(&p.0.net, &x);
        std::slice::from_raw_parts_mut(action, action_len).copy_from_slice(mu.as_slice());
        Ok(())
    })
}

/// Σ^L at `step`, row-major, into `out` of length `action_dim²`.
///
/// # Safety
/// `policy` must be a live handle and `out` must point to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn emgps_policy_action_covariance(
    policy: *const EmgpsPolicy,
    step: usize,
    out: *mut f64,
    out_len: usize,
) -> EmgpsStatus {
    guard(|| {
        let p = handle(policy, "policy")?;
        if out.is_null() {
            return Err(null("output buffer"));
        }
        let cov =
            p.0.covariances
                .get(step)
                .ok_or_else(|| Error::Domain(format!("step {step} beyond the horizon")))?;
        if out_len != cov.len() {
            return Err(Error::Dimension(format!(
                "buffer of {out_len} for a {}×{} covariance",
                cov.nrows(),
                cov.ncols()
            ))
            .into());
        }
        let dst = std::slice::from_raw_parts_mut(out, out_len);
        for r in 0..cov.nrows() {
            for c in 0..cov.ncols() {
                dst[r * cov.ncols() + c] = cov[(r, c)];
            }
        }
        Ok(())
    })
}

/// # Safety
/// `policy` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn emgps_policy_free(policy: *mut EmgpsPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Success decision of the configuration's criterion for a final position
/// and final action, each of length 2.
///
/// # Safety
/// `cfg` must be a live handle; `position` and `action` must point to two
/// doubles and `success` to a writable bool.
#[no_mangle]
pub unsafe extern "C" fn emgps_success_test(
    cfg: *const EmgpsConfig,
    position: *const f64,
    action: *const f64,
    success: *mut bool,
) -> EmgpsStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        if position.is_null() || action.is_null() || success.is_null() {
            return Err(null("position, action or result"));
        }
        let crit = &cfg.0.test.criterion;
        *success = crit.position.contains([*position, *position.add(1)])
            && crit.action.contains([*action, *action.add(1)]);
        Ok(())
    })
}
