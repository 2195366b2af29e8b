//! C interface to the projectnet solver.
//!
//! Handles are opaque and owned by the caller; release them with the
//! matching `*_free` function. Every call returns a [`PnStatus`]; on
//! failure [`pn_last_error`] holds a message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use projectnet::experiments::{self, ExperimentConfig};
use projectnet::oracles;
use projectnet::problems::{build_problem, Problem, ProblemKind};
use projectnet::psdmap::UpdateRuleModel;
use projectnet::solver::{projectnet_solve, SolveConfig};
use projectnet::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Infeasible = 4,
    Diverged = 5,
    NonFinite = 6,
    Config = 7,
    Io = 8,
    Panic = 9,
}

/// Problem instance built from a JSON problem kind.
pub struct PnProblem(Problem);

/// Update rule `L(u)`.
pub struct PnModel(UpdateRuleModel);

/// Solver settings; see [`pn_solve_config_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct PnSolveConfig {
    pub eta: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub cycles: usize,
    /// Nonzero applies a converged projection to the final iterate.
    pub polish: i32,
}

impl From<PnSolveConfig> for SolveConfig {
    fn from(c: PnSolveConfig) -> Self {
        SolveConfig {
            eta: c.eta,
            gamma: c.gamma,
            iterations: c.iterations,
            cycles: c.cycles,
            record_trajectory: false,
            polish: c.polish != 0,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> PnStatus {
    match e {
        Error::DimensionMismatch { .. } => PnStatus::DimensionMismatch,
        Error::Infeasible(_) | Error::RankDeficient { .. } => PnStatus::Infeasible,
        Error::Diverged { .. } => PnStatus::Diverged,
        Error::NonFinite { .. } | Error::IllConditioned(_) => PnStatus::NonFinite,
        Error::Config(_) | Error::Json(_) | Error::Parse { .. } => PnStatus::Config,
        Error::Io(_) | Error::Csv(_) => PnStatus::Io,
        Error::InvalidParameter(_) => PnStatus::InvalidArgument,
    }
}

struct Fail(PnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            PnStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            PnStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(PnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail(PnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), Fail> {
    if len != src.len() {
        return Err(Fail(
            PnStatus::DimensionMismatch,
            format!("output buffer holds {len} values, {} needed", src.len()),
        ));
    }
    if len > 0 {
        if out.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, len);
    }
    Ok(())
}

unsafe fn problem<'a>(p: *const PnProblem) -> Result<&'a Problem, Fail> {
    p.as_ref().map(|p| &p.0).ok_or_else(|| null("problem"))
}

unsafe fn model<'a>(m: *const PnModel) -> Result<&'a UpdateRuleModel, Fail> {
    m.as_ref().map(|m| &m.0).ok_or_else(|| null("model"))
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `len > 0`) and returns the full message length.
///
/// # Safety
/// `buf` must point to `len` writable bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn pn_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Solver defaults: `η = γ = 0.1`, 5 iterations, 10 projection cycles.
#[no_mangle]
pub extern "C" fn pn_solve_config_default() -> PnSolveConfig {
    let d = SolveConfig::default();
    PnSolveConfig {
        eta: d.eta,
        gamma: d.gamma,
        iterations: d.iterations,
        cycles: d.cycles,
        polish: 0,
    }
}

/// Builds a problem from a JSON kind such as `{"kind":"matching","n":3}`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pn_problem_new(json: *const c_char, out: *mut *mut PnProblem) -> PnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let kind: ProblemKind = serde_json::from_str(text(json, "json")?)
            .map_err(|e| Fail(PnStatus::Config, format!("bad problem kind: {e}")))?;
        let p = build_problem(&kind)?;
        *out = Box::into_raw(Box::new(PnProblem(p)));
        Ok(())
    })
}

/// # Safety
/// `p` must come from [`pn_problem_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pn_problem_free(p: *mut PnProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Decision and uncertainty dimensions.
///
/// # Safety
/// `p` must be a live handle; `dim` and `u_dim` writable or null.
#[no_mangle]
pub unsafe extern "C" fn pn_problem_dims(p: *const PnProblem, dim: *mut usize, u_dim: *mut usize) -> PnStatus {
    guard(|| {
        let p = problem(p)?;
        if !dim.is_null() {
            *dim = p.dim();
        }
        if !u_dim.is_null() {
            *u_dim = p.u_dim();
        }
        Ok(())
    })
}

/// Model with `L ≡ 0`, under which the solver is projected gradient descent.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pn_model_zero(dim: usize, u_dim: usize, out: *mut *mut PnModel) -> PnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(PnModel(UpdateRuleModel::zero(dim, u_dim))));
        Ok(())
    })
}

/// Loads a trained model checkpoint (JSON file).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pn_model_load(path: *const c_char, out: *mut *mut PnModel) -> PnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let body = std::fs::read_to_string(text(path, "path")?).map_err(Error::from)?;
        let m: UpdateRuleModel = serde_json::from_str(&body).map_err(Error::from)?;
        m.validate()?;
        *out = Box::into_raw(Box::new(PnModel(m)));
        Ok(())
    })
}

/// # Safety
/// `m` must come from a `pn_model_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pn_model_free(m: *mut PnModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Runs the unrolled solver on `u` and writes the decision into `w`.
///
/// # Safety
/// Handles must be live; `u` holds `u_len` values and `w` has room for
/// `w_len`; `cfg` may be null for defaults.
#[no_mangle]
pub unsafe extern "C" fn pn_solve(
    p: *const PnProblem,
    m: *const PnModel,
    u: *const f64,
    u_len: usize,
    cfg: *const PnSolveConfig,
    w: *mut f64,
    w_len: usize,
) -> PnStatus {
    guard(|| {
        let (p, m) = (problem(p)?, model(m)?);
        let u = slice(u, u_len, "u")?;
        let cfg: SolveConfig = cfg.as_ref().copied().unwrap_or_else(|| pn_solve_config_default()).into();
        let r = projectnet_solve(p, m, u, &cfg)?;
        write_out(&r.w, w, w_len)
    })
}

/// `k`-cycle approximate projection of `w_in` onto a problem with a fixed
/// feasible set.
///
/// # Safety
/// `p` must be live; `w_in` and `w_out` hold `len` values each.
#[no_mangle]
pub unsafe extern "C" fn pn_project(
    p: *const PnProblem,
    w_in: *const f64,
    len: usize,
    cycles: usize,
    w_out: *mut f64,
) -> PnStatus {
    guard(|| {
        let p = problem(p)?;
        if p.has_parametric_rhs() {
            return Err(Fail(
                PnStatus::InvalidArgument,
                "feasible set depends on u; use pn_solve".into(),
            ));
        }
        let w = slice(w_in, len, "w_in")?;
        let r = p.plan().project(w, cycles)?;
        write_out(&r, w_out, len)
    })
}

/// Exact optimum for `u`, written into `w`, and its objective.
///
/// # Safety
/// `p` must be live; `u` holds `u_len` values, `w` has room for `w_len`;
/// `objective` writable or null.
#[no_mangle]
pub unsafe extern "C" fn pn_optimum(
    p: *const PnProblem,
    u: *const f64,
    u_len: usize,
    w: *mut f64,
    w_len: usize,
    objective: *mut f64,
) -> PnStatus {
    guard(|| {
        let p = problem(p)?;
        let r = oracles::optimum(p, slice(u, u_len, "u")?)?;
        write_out(&r.w, w, w_len)?;
        if !objective.is_null() {
            *objective = r.objective;
        }
        Ok(())
    })
}

/// Runs an experiment config (JSON text) and writes its artifacts to `out_dir`.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn pn_run_experiment(config_json: *const c_char, out_dir: *const c_char) -> PnStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_json(text(config_json, "config")?)?;
        let dir = text(out_dir, "out_dir")?;
        experiments::run(&cfg)?.write(Path::new(dir))?;
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
