//! C ABI over `nesslsi`.
//!
//! Every function returns an [`NlsiStatus`]; outputs go through pointers that
//! are written only on success. The message of the last failure on the calling
//! thread is available from [`nlsi_last_error_message`]. Strings returned by
//! the library are released with [`nlsi_string_free`], metric handles with
//! [`nlsi_metric_free`]. Panics never cross the boundary.

// `!(x > 0.0)` rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::DMatrix;
use nesslsi::cli;
use nesslsi::constants::{self, ConstantsReport, EllipticInputs};
use nesslsi::metric::{self, MetricParams, MetricTable};
use nesslsi::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlsiStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Parameters, dimensions or configuration were rejected.
    InvalidArgument = 3,
    /// Quadrature, simulation or an estimator failed.
    Numerical = 4,
    /// Filesystem or serialization failure.
    Io = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Opaque metric: parameters plus the tabulated profile.
pub struct NlsiMetric {
    params: MetricParams,
    table: MetricTable,
}

/// Inputs of the elliptic constants.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NlsiEllipticInputs {
    pub l: f64,
    pub rho: f64,
    pub r: f64,
    pub sigma: f64,
    pub d: usize,
    pub alpha_ext: f64,
    /// `sup{-x·b(x) : |x| ≤ R_*}`; ignored unless `has_sup_inner` is nonzero.
    pub sup_inner: f64,
    pub has_sup_inner: i32,
}

/// Elliptic constants; `c_ls = a + c(b + 2)/4`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct NlsiConstants {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub c_ls: f64,
    pub t0: f64,
    pub hyper_bound_2t0: f64,
    /// Nonzero when σ is below the threshold of the Poincaré bound.
    pub sigma_below_threshold: i32,
}

/// Scalars of a metric table.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct NlsiMetricScalars {
    pub theta: f64,
    pub eta: f64,
    pub lambda: f64,
    pub r0: f64,
    pub r_end: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub epsilon: f64,
    pub kappa: f64,
    pub c1: f64,
    pub c2: f64,
    pub dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> NlsiStatus {
    match e {
        Error::DimensionMismatch { .. }
        | Error::InvalidParameter { .. }
        | Error::MissingComponent(_)
        | Error::Inadmissible(_)
        | Error::UnknownScenario(_)
        | Error::Config(_) => NlsiStatus::InvalidArgument,
        Error::Json(_) => NlsiStatus::InvalidArgument,
        Error::Io(_) | Error::Csv(_) => NlsiStatus::Io,
        _ => NlsiStatus::Numerical,
    }
}

struct Fail(NlsiStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail(NlsiStatus::Io, e.to_string())
    }
}

fn null(name: &str) -> Fail {
    Fail(NlsiStatus::NullPointer, format!("`{name}` is null"))
}

/// Runs `f`, recording failures and catching panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NlsiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NlsiStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            NlsiStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|e| Fail(NlsiStatus::InvalidUtf8, format!("`{name}`: {e}")))
}

/// # Safety
/// `p` must be null or point to `len` readable doubles.
unsafe fn read_slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn into_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s).map(CString::into_raw).map_err(|e| Fail(NlsiStatus::Io, e.to_string()))
}

/// Message of the last failure on this thread, or null if none.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nlsi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nlsi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn nlsi_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Computes the elliptic log-Sobolev constants.
///
/// # Safety
/// `inputs` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn nlsi_constants_compute(
    inputs: *const NlsiEllipticInputs,
    out: *mut NlsiConstants,
) -> NlsiStatus {
    guard(|| {
        let i = inputs.as_ref().ok_or_else(|| null("inputs"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let rep = ConstantsReport::compute(&EllipticInputs {
            l: i.l,
            rho: i.rho,
            r: i.r,
            sigma: i.sigma,
            d: i.d,
            alpha_ext: i.alpha_ext,
            sup_inner: (i.has_sup_inner != 0).then_some(i.sup_inner),
        })?;
        *out = NlsiConstants {
            a: rep.a,
            b: rep.b,
            c: rep.c,
            c_ls: rep.c_ls,
            t0: rep.t0,
            hyper_bound_2t0: rep.hyper_bound_2t0,
            sigma_below_threshold: rep.sigma_below_threshold as i32,
        };
        Ok(())
    })
}

/// Harnack factor for `(P_t f)^α(y) ≤ P_t f^α(x) · factor`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nlsi_harnack_factor(
    k_w: f64,
    sigma: f64,
    alpha: f64,
    t: f64,
    dist: f64,
    out: *mut f64,
) -> NlsiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = constants::harnack_factor(k_w, sigma, alpha, t, dist)?;
        Ok(())
    })
}

/// Hypercontractivity time `t₀` and the `‖P_t‖_{α→β}` bound at `t > t₀`.
///
/// # Safety
/// `t0_out` and `bound_out` must be valid pointers.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn nlsi_hypercontractivity_bound(
    l: f64,
    rho: f64,
    r: f64,
    sigma: f64,
    d: usize,
    alpha: f64,
    beta: f64,
    t: f64,
    t0_out: *mut f64,
    bound_out: *mut f64,
) -> NlsiStatus {
    guard(|| {
        if t0_out.is_null() {
            return Err(null("t0_out"));
        }
        if bound_out.is_null() {
            return Err(null("bound_out"));
        }
        let (t0, bound) = constants::hypercontractivity_bound(l, rho, r, sigma, d, alpha, beta, t)?;
        *t0_out = t0;
        *bound_out = bound;
        Ok(())
    })
}

/// Builds the kinetic metric for the row-major `dim × dim` stiffness `k`.
///
/// `n_smooth = 0` selects the limiting profile; `n_grid = 0` the default grid.
///
/// # Safety
/// `k` must point to `dim * dim` doubles and `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn nlsi_metric_new(
    k: *const f64,
    dim: usize,
    l1: f64,
    l2: f64,
    r: f64,
    quad_tol: f64,
    n_smooth: u64,
    n_grid: usize,
    out: *mut *mut NlsiMetric,
) -> NlsiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let entries = read_slice(k, dim.saturating_mul(dim), "k")?;
        let km = DMatrix::from_row_slice(dim, dim, entries);
        let params = metric::metric_constants(&km, l1, l2, r)?;
        let grid = if n_grid == 0 { metric::DEFAULT_GRID } else { n_grid };
        let table = metric::build_metric_with(&params, quad_tol, (n_smooth > 0).then_some(n_smooth), grid)?;
        *out = Box::into_raw(Box::new(NlsiMetric { params, table }));
        Ok(())
    })
}

/// Releases a metric handle. Null is a no-op.
///
/// # Safety
/// `m` must come from [`nlsi_metric_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn nlsi_metric_free(m: *mut NlsiMetric) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Scalars of the metric.
///
/// # Safety
/// `m` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn nlsi_metric_scalars(m: *const NlsiMetric, out: *mut NlsiMetricScalars) -> NlsiStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("m"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = &m.params;
        let s = &m.table.scalars;
        *out = NlsiMetricScalars {
            theta: p.theta,
            eta: p.eta,
            lambda: p.lambda,
            r0: p.r0,
            r_end: m.table.r_end,
            kappa1: s.kappa1,
            kappa2: p.kappa2,
            epsilon: s.epsilon,
            kappa: s.kappa,
            c1: s.c1,
            c2: s.c2,
            dim: p.dim,
        };
        Ok(())
    })
}

/// Concave profile `f(r)`.
///
/// # Safety
/// `m` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn nlsi_metric_f(m: *const NlsiMetric, r: f64, out: *mut f64) -> NlsiStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("m"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if !(r >= 0.0) {
            return Err(Fail(NlsiStatus::InvalidArgument, format!("r must be >= 0, got {r}")));
        }
        *out = m.table.f_at(r);
        Ok(())
    })
}

/// Semimetric `ρ(z, z')` on phase space; `z` and `zp` hold `2·dim` doubles.
///
/// # Safety
/// `z` and `zp` must point to `len` doubles; `m` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nlsi_metric_rho(
    m: *const NlsiMetric,
    z: *const f64,
    zp: *const f64,
    len: usize,
    out: *mut f64,
) -> NlsiStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("m"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let z = read_slice(z, len, "z")?;
        let zp = read_slice(zp, len, "zp")?;
        *out = metric::rho_star(&m.table, &m.params, z, zp)?;
        Ok(())
    })
}

/// Runs the estimator battery of a JSON scenario config.
///
/// On success `*report_json` holds the run report (free it with
/// [`nlsi_string_free`]) and `*exit_code` the CLI exit code of the run
/// (0 all pass, 1 violation, 3 aborted). `out_dir` may be null, in which case
/// no files are written.
///
/// # Safety
/// `config_json` must be a NUL-terminated string, `out_dir` null or one, and
/// `report_json` and `exit_code` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn nlsi_verify_json(
    config_json: *const c_char,
    out_dir: *const c_char,
    report_json: *mut *mut c_char,
    exit_code: *mut i32,
) -> NlsiStatus {
    guard(|| {
        if report_json.is_null() {
            return Err(null("report_json"));
        }
        if exit_code.is_null() {
            return Err(null("exit_code"));
        }
        let text = read_str(config_json, "config_json")?;
        let dir = if out_dir.is_null() { None } else { Some(Path::new(read_str(out_dir, "out_dir")?)) };
        let cfg = cli::parse_config(text)?;
        let built = cli::validate_config(&cfg)?;
        let report = cli::cmd_verify(&cfg, &built, dir)?;
        let s = serde_json::to_string(&report)?;
        *report_json = into_c_string(s)?;
        *exit_code = report.exit_code();
        Ok(())
    })
}

/// Closed-form constants of a JSON scenario config, as a JSON string.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `constants_json` valid.
#[no_mangle]
pub unsafe extern "C" fn nlsi_constants_json(
    config_json: *const c_char,
    constants_json: *mut *mut c_char,
) -> NlsiStatus {
    guard(|| {
        if constants_json.is_null() {
            return Err(null("constants_json"));
        }
        let text = read_str(config_json, "config_json")?;
        let cfg = cli::parse_config(text)?;
        let built = cli::validate_config(&cfg)?;
        let v = cli::compute_constants(&built, &cfg.constants)?;
        *constants_json = into_c_string(serde_json::to_string(&v)?)?;
        Ok(())
    })
}
