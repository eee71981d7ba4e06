//! C ABI over the `dmilo` crate.
//!
//! Objects cross the boundary as opaque handles created by `*_new` functions
//! and released with the matching `*_free`. Every fallible call returns a
//! [`DmiloStatus`]; on failure `dmilo_last_error_message` describes the
//! problem. Strings returned to the caller are owned by the caller and must be
//! released with `dmilo_string_free`. Panics never unwind into C; they are
//! reported as `DMILO_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use dmilo::harness::config::TaskConfig;
use dmilo::harness::{run_experiment, ExperimentConfig};
use dmilo::solvers::run_solver;
use dmilo::{
    Error, ForwardOperator, GmmPrior, InnerSettings, PriorConfig, RunReport, Schedule, SolverSettings,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmiloStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    Shape = 3,
    Domain = 4,
    Divergence = 5,
    RunFailed = 6,
    Panic = 7,
}

/// Noise schedule handle.
pub struct DmiloSchedule(Schedule);

/// Gaussian-mixture prior handle.
pub struct DmiloPrior(GmmPrior);

/// Forward operator handle.
pub struct DmiloOperator(Box<dyn ForwardOperator>);

/// Solver result handle.
pub struct DmiloReport(RunReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DmiloStatus {
    match e {
        Error::Shape { .. } => DmiloStatus::Shape,
        Error::Domain { .. } => DmiloStatus::Domain,
        Error::Divergence { .. } => DmiloStatus::Divergence,
        Error::Singularity(_) | Error::Degenerate(_) => DmiloStatus::RunFailed,
        _ => DmiloStatus::InvalidConfig,
    }
}

fn guard(f: impl FnOnce() -> Result<(), DmiloStatus>) -> DmiloStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DmiloStatus::Ok,
        Ok(Err(s)) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DmiloStatus::Panic
        }
    }
}

fn fail(e: Error) -> DmiloStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> DmiloStatus {
    set_error(format!("{what} is null"));
    DmiloStatus::NullPointer
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, DmiloStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], DmiloStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], DmiloStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, DmiloStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        DmiloStatus::InvalidConfig
    })
}

fn parse<T: serde::de::DeserializeOwned>(json: &str, what: &str) -> Result<T, DmiloStatus> {
    serde_json::from_str(json).map_err(|e| {
        set_error(format!("{what}: {e}"));
        DmiloStatus::InvalidConfig
    })
}

fn copy_out(src: &[f64], dst: &mut [f64]) -> Result<(), DmiloStatus> {
    if src.len() != dst.len() {
        set_error(format!("output buffer has {} slots, need {}", dst.len(), src.len()));
        return Err(DmiloStatus::Shape);
    }
    dst.copy_from_slice(src);
    Ok(())
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), DmiloStatus> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn owned_string(s: String) -> Result<*mut c_char, DmiloStatus> {
    CString::new(s).map(CString::into_raw).map_err(|_| {
        set_error("string contains a nul byte".into());
        DmiloStatus::RunFailed
    })
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dmilo_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dmilo_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Static version string.
#[no_mangle]
pub extern "C" fn dmilo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Variance-preserving schedule with `steps` uniform steps on `[epsilon, t_end]`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn dmilo_schedule_new(
    beta0: f64,
    beta1: f64,
    epsilon: f64,
    t_end: f64,
    steps: usize,
    out: *mut *mut DmiloSchedule,
) -> DmiloStatus {
    guard(|| {
        let s = Schedule::new(beta0, beta1, epsilon, t_end, steps).map_err(fail)?;
        put(out, DmiloSchedule(s))
    })
}

/// # Safety
/// `s` must be null or a handle from `dmilo_schedule_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dmilo_schedule_free(s: *mut DmiloSchedule) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Signal coefficient `alpha(t)` and noise coefficient `sigma(t)`.
///
/// # Safety
/// `s` must be a live schedule handle; `alpha` and `sigma` writable.
#[no_mangle]
pub unsafe extern "C" fn dmilo_schedule_level(
    s: *const DmiloSchedule,
    t: f64,
    alpha: *mut f64,
    sigma: *mut f64,
) -> DmiloStatus {
    guard(|| {
        let s = borrow(s, "schedule")?;
        let lvl = s.0.checked_level(t).map_err(fail)?;
        if alpha.is_null() || sigma.is_null() {
            return Err(null("alpha/sigma output"));
        }
        *alpha = lvl.alpha;
        *sigma = lvl.sigma;
        Ok(())
    })
}

/// Toy prior: `k` components in `R^n` with common standard deviation `tau`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dmilo_prior_new_toy(
    k: usize,
    n: usize,
    tau: f64,
    seed: u64,
    out: *mut *mut DmiloPrior,
) -> DmiloStatus {
    guard(|| {
        let p = GmmPrior::toy(k, n, tau, seed).map_err(fail)?;
        put(out, DmiloPrior(p))
    })
}

/// Prior from a JSON `prior` block (`{"K": 5, "n": 16, "tau": 0.1, ...}`).
///
/// # Safety
/// `json` must be a nul-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dmilo_prior_from_json(
    json: *const c_char,
    out: *mut *mut DmiloPrior,
) -> DmiloStatus {
    guard(|| {
        let cfg: PriorConfig = parse(text(json, "prior json")?, "prior json")?;
        put(out, DmiloPrior(cfg.build().map_err(fail)?))
    })
}

/// # Safety
/// `p` must be null or a live prior handle.
#[no_mangle]
pub unsafe extern "C" fn dmilo_prior_free(p: *mut DmiloPrior) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Signal dimension of the prior, or 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live prior handle.
#[no_mangle]
pub unsafe extern "C" fn dmilo_prior_dim(p: *const DmiloPrior) -> usize {
    p.as_ref().map_or(0, |p| p.0.dim())
}

/// Posterior mean `E[x_0 | x_t = x]` written to `out` (length `n`).
///
/// # Safety
/// Handles must be live; `x` and `out` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dmilo_prior_denoise(
    p: *const DmiloPrior,
    s: *const DmiloSchedule,
    x: *const f64,
    n: usize,
    t: f64,
    out: *mut f64,
) -> DmiloStatus {
    guard(|| {
        let p = borrow(p, "prior")?;
        let s = borrow(s, "schedule")?;
        let x = input(x, n, "x")?;
        let lvl = s.0.checked_level(t).map_err(fail)?;
        let d = p.0.denoise(x, lvl).map_err(fail)?;
        copy_out(&d, output(out, n, "out")?)
    })
}

/// Operator from a JSON `task` block for signals of length `n`.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dmilo_operator_from_json(
    json: *const c_char,
    n: usize,
    seed: u64,
    out: *mut *mut DmiloOperator,
) -> DmiloStatus {
    guard(|| {
        let task: TaskConfig = parse(text(json, "task json")?, "task json")?;
        let op = task.build_operator(n, seed).map_err(fail)?;
        put(out, DmiloOperator(op))
    })
}

/// # Safety
/// `op` must be null or a live operator handle.
#[no_mangle]
pub unsafe extern "C" fn dmilo_operator_free(op: *mut DmiloOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// # Safety
/// `op` must be null or a live operator handle.
#[no_mangle]
pub unsafe extern "C" fn dmilo_operator_in_dim(op: *const DmiloOperator) -> usize {
    op.as_ref().map_or(0, |o| o.0.in_dim())
}

/// # Safety
/// `op` must be null or a live operator handle.
#[no_mangle]
pub unsafe extern "C" fn dmilo_operator_out_dim(op: *const DmiloOperator) -> usize {
    op.as_ref().map_or(0, |o| o.0.out_dim())
}

/// `out = A(x)`.
///
/// # Safety
/// `op` must be live; `x` holds `n` doubles and `out` has room for `m`.
#[no_mangle]
pub unsafe extern "C" fn dmilo_operator_apply(
    op: *const DmiloOperator,
    x: *const f64,
    n: usize,
    out: *mut f64,
    m: usize,
) -> DmiloStatus {
    guard(|| {
        let op = borrow(op, "operator")?;
        let x = input(x, n, "x")?;
        let y = dmilo::operators::apply_checked(op.0.as_ref(), x).map_err(fail)?;
        copy_out(&y, output(out, m, "out")?)
    })
}

/// Runs the solver described by `solver_json` (a `solver` block) with the
/// inner settings `optim_json` (an `optim` block; null for defaults).
///
/// # Safety
/// Handles must be live; `y` holds `m` doubles; strings nul-terminated or
/// null where allowed; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dmilo_solve(
    y: *const f64,
    m: usize,
    op: *const DmiloOperator,
    s: *const DmiloSchedule,
    p: *const DmiloPrior,
    solver_json: *const c_char,
    optim_json: *const c_char,
    out: *mut *mut DmiloReport,
) -> DmiloStatus {
    guard(|| {
        let y = input(y, m, "y")?;
        let op = borrow(op, "operator")?;
        let s = borrow(s, "schedule")?;
        let p = borrow(p, "prior")?;
        let settings: SolverSettings = parse(text(solver_json, "solver json")?, "solver json")?;
        let optim: InnerSettings = if optim_json.is_null() {
            InnerSettings::default()
        } else {
            parse(text(optim_json, "optim json")?, "optim json")?
        };
        let report = run_solver(y, op.0.as_ref(), &s.0, &p.0, &settings, &optim).map_err(fail)?;
        put(out, DmiloReport(report))
    })
}

/// # Safety
/// `r` must be null or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn dmilo_report_free(r: *mut DmiloReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Length of the estimate, or 0 for a null handle.
///
/// # Safety
/// `r` must be null or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn dmilo_report_estimate_len(r: *const DmiloReport) -> usize {
    r.as_ref().map_or(0, |r| r.0.estimate.len())
}

/// Copies the estimate into `out` (exactly `len` doubles).
///
/// # Safety
/// `r` must be live; `out` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dmilo_report_estimate(
    r: *const DmiloReport,
    out: *mut f64,
    len: usize,
) -> DmiloStatus {
    guard(|| {
        let r = borrow(r, "report")?;
        copy_out(&r.0.estimate, output(out, len, "out")?)
    })
}

/// Initial and final measurement residuals and the retained-context peak.
///
/// # Safety
/// `r` must be live; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dmilo_report_summary(
    r: *const DmiloReport,
    residual_init: *mut f64,
    residual_final: *mut f64,
    context_peak: *mut usize,
) -> DmiloStatus {
    guard(|| {
        let r = borrow(r, "report")?;
        if residual_init.is_null() || residual_final.is_null() || context_peak.is_null() {
            return Err(null("summary output"));
        }
        *residual_init = r.0.residual_init;
        *residual_final = r.0.residual_final();
        *context_peak = r.0.context_peak;
        Ok(())
    })
}

/// Full report as JSON; free with `dmilo_string_free`.
///
/// # Safety
/// `r` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dmilo_report_to_json(
    r: *const DmiloReport,
    out: *mut *mut c_char,
) -> DmiloStatus {
    guard(|| {
        let r = borrow(r, "report")?;
        if out.is_null() {
            return Err(null("output string"));
        }
        let json = serde_json::to_string(&r.0).map_err(|e| fail(e.into()))?;
        *out = owned_string(json)?;
        Ok(())
    })
}

/// Runs a whole experiment config (JSON text) in memory and returns the
/// results document as JSON; nothing is written to disk. Trial failures are
/// reported inside the document and yield `DMILO_STATUS_RUN_FAILED` with the
/// document still returned.
///
/// # Safety
/// `config_json` must be nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dmilo_run_experiment_json(
    config_json: *const c_char,
    out: *mut *mut c_char,
) -> DmiloStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output string"));
        }
        let cfg = ExperimentConfig::from_json(text(config_json, "config json")?).map_err(fail)?;
        let result = run_experiment(&cfg).map_err(fail)?;
        let json = serde_json::to_string(&result).map_err(|e| fail(e.into()))?;
        *out = owned_string(json)?;
        if result.failed() {
            set_error(format!("{} of {} trials failed", result.summary.failed, result.summary.trials));
            return Err(DmiloStatus::RunFailed);
        }
        Ok(())
    })
}
