//! Batch front end: a JSON scenario config in, JSON reports and CSV series out.
//!
//! Exit codes are a stable contract: 0 all flags pass, 1 some bound is
//! violated, 2 the config is invalid, 3 a run aborted.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::constants::{self, ConstantsReport, EllipticInputs};
use crate::error::{Error, Result};
use crate::estimators::{self as est, EllipticCoupling, InitialPair, LipBound, MckvConfig};
use crate::metric::{build_metric_with, metric_constants, MetricParams, MetricScalars, MetricTable, DEFAULT_GRID};
use crate::models::scenarios::{BuiltScenario, CompetitionSystem, Scenario};
use crate::models::{
    derive_elliptic_fields, normalize_kinetic, probe_one_sided_condition, EllipticModel, KineticModel, PairSampler,
};
use crate::rng::derive_seed;
use crate::simulate::{self, Record, SimConfig};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "nesslsi", version, about = "Coupling simulations and explicit log-Sobolev constants")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Validate the config and exit.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Explicit constants of the scenario.
    Constants,
    /// Run the estimator battery and check every bound.
    Verify,
    /// Run `verify` (or `constants`) over a parameter grid.
    Sweep,
    /// Write coupled trajectories as CSV.
    DumpTrajectories,
}

// ---------------------------------------------------------------------------
// Config schema

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub constants: ConstantsOptions,
    #[serde(default)]
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub dump: Option<DumpSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsOptions {
    pub alpha_ext: f64,
    /// Sampling resolution of `sup{-x·b(x) : |x| ≤ R_*}`.
    pub sup_resolution: usize,
    pub harnack: Vec<HarnackQuery>,
    pub quad_tol: f64,
    pub n_smooth: Option<u64>,
    pub grid: usize,
}

impl Default for ConstantsOptions {
    fn default() -> Self {
        ConstantsOptions {
            alpha_ext: 1.0,
            sup_resolution: 64,
            harnack: vec![],
            quad_tol: 1e-10,
            n_smooth: None,
            grid: DEFAULT_GRID,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnackQuery {
    #[serde(default)]
    pub k_w: f64,
    pub alpha: f64,
    pub t: f64,
    pub dist: f64,
}

/// Test functions of the Harnack, Girsanov, hypercontractivity and LSI
/// estimators. All act on the first coordinate except `square`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFnSpec {
    One,
    /// `e^{c x₀}`.
    Exp {
        c: f64,
    },
    /// `min(e^{x₀}, cap)`.
    ClippedExp {
        cap: f64,
    },
    /// `|x|²`.
    Square,
    /// `1 + amp·sin(x₀)`.
    OnePlusSin {
        amp: f64,
    },
}

impl TestFnSpec {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            TestFnSpec::One => 1.0,
            TestFnSpec::Exp { c } => (c * x[0]).exp(),
            TestFnSpec::ClippedExp { cap } => x[0].exp().min(cap),
            TestFnSpec::Square => x.iter().map(|c| c * c).sum(),
            TestFnSpec::OnePlusSin { amp } => 1.0 + amp * x[0].sin(),
        }
    }

    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        match *self {
            TestFnSpec::One => {}
            TestFnSpec::Exp { c } => out[0] = c * (c * x[0]).exp(),
            TestFnSpec::ClippedExp { cap } => {
                if x[0].exp() < cap {
                    out[0] = x[0].exp();
                }
            }
            TestFnSpec::Square => out.iter_mut().zip(x).for_each(|(o, c)| *o = 2.0 * c),
            TestFnSpec::OnePlusSin { amp } => out[0] = amp * x[0].cos(),
        }
    }
}

fn dt_default() -> f64 {
    1e-3
}

fn slack_default() -> f64 {
    0.10
}

fn n_smooth_default() -> u64 {
    1000
}

fn kw_zero() -> f64 {
    0.0
}

/// One entry of the estimator battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    /// Sampled check of the declared `(ρ, L, R)`.
    OneSidedProbe { n_pairs: usize, sampler: PairSampler },
    W1Contraction {
        coupling: EllipticCoupling,
        init: InitialPair,
        times: Vec<f64>,
        n: usize,
        #[serde(default = "dt_default")]
        dt: f64,
        /// Flag `κ̂ ≥ min_rate`; defaults to `ρ - 0.02` for a synchronous
        /// coupling with `R = 0`.
        #[serde(default)]
        min_rate: Option<f64>,
    },
    KineticCoupling {
        init: InitialPair,
        times: Vec<f64>,
        n: usize,
        #[serde(default = "dt_default")]
        dt: f64,
        #[serde(default = "n_smooth_default")]
        n_smooth: u64,
        #[serde(default = "slack_default")]
        slack: f64,
    },
    Coalescence {
        x0: Vec<f64>,
        y0: Vec<f64>,
        times: Vec<f64>,
        n: usize,
        #[serde(default = "dt_default")]
        dt: f64,
    },
    ReflectionConstants {
        x0: Vec<f64>,
        y0: Vec<f64>,
        times: Vec<f64>,
        n: usize,
        #[serde(default = "dt_default")]
        dt: f64,
    },
    Lyapunov {
        delta: f64,
        x0: Vec<f64>,
        replicas: usize,
        samples_per_replica: usize,
        #[serde(default = "dt_default")]
        dt: f64,
    },
    Harnack {
        test_fn: TestFnSpec,
        alpha: f64,
        x: Vec<f64>,
        y: Vec<f64>,
        t: f64,
        n: usize,
        #[serde(default = "kw_zero")]
        k_w: f64,
        #[serde(default = "dt_default")]
        dt: f64,
    },
    Girsanov {
        test_fn: TestFnSpec,
        x: Vec<f64>,
        y: Vec<f64>,
        t: f64,
        n: usize,
        #[serde(default = "kw_zero")]
        k_w: f64,
        #[serde(default = "dt_default")]
        dt: f64,
    },
    /// `h_T(x)` with the model's own potential `φ`.
    FeynmanKac {
        x: Vec<f64>,
        t: f64,
        n: usize,
        #[serde(default = "dt_default")]
        dt: f64,
    },
    ULipschitzScan {
        grid: Vec<Vec<f64>>,
        t: f64,
        n: usize,
        #[serde(default = "dt_default")]
        dt: f64,
        /// Elliptic `C'`; fitted from a reflection run when absent.
        #[serde(default)]
        c_prime: Option<f64>,
        #[serde(default)]
        fit: Option<FitSpec>,
    },
    Hypercontractivity {
        test_fn: TestFnSpec,
        alpha: f64,
        beta: f64,
        /// Defaults to `2t₀`.
        #[serde(default)]
        t: Option<f64>,
        n_outer: usize,
        n_inner: usize,
        x0: Vec<f64>,
        #[serde(default = "dt_default")]
        dt: f64,
    },
    /// Closed-form `‖P_t‖_{α→β}` bound only.
    HyperBound { alpha: f64, beta: f64, t: f64 },
    DefectiveLsi {
        test_fn: TestFnSpec,
        n: usize,
        x0: Vec<f64>,
        #[serde(default = "dt_default")]
        dt: f64,
    },
    Mckv {
        n_particles: usize,
        n_iters: usize,
        t_iter: f64,
        #[serde(default = "dt_default")]
        dt: f64,
    },
}

/// Reflection run used to fit `C'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub times: Vec<f64>,
    pub n: usize,
    #[serde(default = "dt_default")]
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Family {
    Elliptic,
    Kinetic,
    Competition,
    Any,
}

impl EstimatorSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            EstimatorSpec::OneSidedProbe { .. } => "one_sided_probe",
            EstimatorSpec::W1Contraction { .. } => "w1_contraction",
            EstimatorSpec::KineticCoupling { .. } => "kinetic_coupling",
            EstimatorSpec::Coalescence { .. } => "coalescence",
            EstimatorSpec::ReflectionConstants { .. } => "reflection_constants",
            EstimatorSpec::Lyapunov { .. } => "lyapunov",
            EstimatorSpec::Harnack { .. } => "harnack",
            EstimatorSpec::Girsanov { .. } => "girsanov",
            EstimatorSpec::FeynmanKac { .. } => "feynman_kac",
            EstimatorSpec::ULipschitzScan { .. } => "u_lipschitz_scan",
            EstimatorSpec::Hypercontractivity { .. } => "hypercontractivity",
            EstimatorSpec::HyperBound { .. } => "hyper_bound",
            EstimatorSpec::DefectiveLsi { .. } => "defective_lsi",
            EstimatorSpec::Mckv { .. } => "mckv",
        }
    }

    fn family(&self) -> Family {
        match self {
            EstimatorSpec::KineticCoupling { .. } => Family::Kinetic,
            EstimatorSpec::FeynmanKac { .. } | EstimatorSpec::ULipschitzScan { .. } => Family::Any,
            EstimatorSpec::Mckv { .. } => Family::Competition,
            _ => Family::Elliptic,
        }
    }
}

/// Parameter grid: each value is written at a JSON pointer into the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// JSON pointer, e.g. `/estimators/0/delta`.
    pub pointer: String,
    pub values: Vec<Value>,
    #[serde(default = "sweep_verify")]
    pub command: SweepCommand,
}

fn sweep_verify() -> SweepCommand {
    SweepCommand::Verify
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepCommand {
    Verify,
    Constants,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpSpec {
    pub coupling: DumpCoupling,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub n_paths: usize,
    pub horizon: f64,
    #[serde(default = "dt_default")]
    pub dt: f64,
    #[serde(default = "stride_default")]
    pub stride: usize,
    #[serde(default = "kw_zero")]
    pub k_w: f64,
    #[serde(default = "n_smooth_default")]
    pub n_smooth: u64,
}

fn stride_default() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DumpCoupling {
    Synchronous,
    Reflection,
    Girsanov,
    Kinetic,
}

/// Parses a config from JSON text. Unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Checks everything that can be checked without simulating: the scenario
/// builds, every estimator fits its family and has sane budgets.
pub fn validate_config(cfg: &ScenarioConfig) -> Result<BuiltScenario> {
    let built = cfg.scenario.build().map_err(|e| config_err(format!("scenario: {e}")))?;
    let family = match &built {
        BuiltScenario::Elliptic(_) => Family::Elliptic,
        BuiltScenario::Kinetic(_) => Family::Kinetic,
        BuiltScenario::Competition(_) => Family::Competition,
    };
    for (i, e) in cfg.estimators.iter().enumerate() {
        let f = e.family();
        let fits = f == family || (f == Family::Any && family != Family::Competition);
        if !fits {
            return Err(config_err(format!(
                "estimator {i} ({}) does not apply to scenario `{}`",
                e.kind(),
                cfg.scenario.name()
            )));
        }
        let dt = match e {
            EstimatorSpec::W1Contraction { dt, .. }
            | EstimatorSpec::KineticCoupling { dt, .. }
            | EstimatorSpec::Coalescence { dt, .. }
            | EstimatorSpec::ReflectionConstants { dt, .. }
            | EstimatorSpec::Lyapunov { dt, .. }
            | EstimatorSpec::Harnack { dt, .. }
            | EstimatorSpec::Girsanov { dt, .. }
            | EstimatorSpec::FeynmanKac { dt, .. }
            | EstimatorSpec::ULipschitzScan { dt, .. }
            | EstimatorSpec::Hypercontractivity { dt, .. }
            | EstimatorSpec::DefectiveLsi { dt, .. }
            | EstimatorSpec::Mckv { dt, .. } => Some(*dt),
            _ => None,
        };
        if let Some(dt) = dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(config_err(format!("estimator {i}: dt must be positive")));
            }
        }
        let times = match e {
            EstimatorSpec::W1Contraction { times, .. }
            | EstimatorSpec::KineticCoupling { times, .. }
            | EstimatorSpec::Coalescence { times, .. }
            | EstimatorSpec::ReflectionConstants { times, .. } => Some(times),
            _ => None,
        };
        if let Some(t) = times {
            if t.is_empty() || t.windows(2).any(|w| !(w[1] > w[0])) || t[0] < 0.0 {
                return Err(config_err(format!("estimator {i}: times must be nonnegative and increasing")));
            }
        }
    }
    if let Some(s) = &cfg.sweep {
        if s.values.is_empty() {
            return Err(config_err("sweep grid is empty"));
        }
        if !s.pointer.starts_with('/') {
            return Err(config_err("sweep pointer must start with '/'"));
        }
    }
    Ok(built)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRecord {
    pub index: usize,
    pub kind: String,
    pub seed: u64,
    /// Headline number of the estimator.
    pub value: Option<f64>,
    pub bound: Option<f64>,
    /// `None` when the estimator has nothing to check.
    pub pass: Option<bool>,
    pub wall_seconds: f64,
    pub result: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagSummary {
    pub index: usize,
    pub kind: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub all_pass: bool,
    pub n_pass: usize,
    pub n_fail: usize,
    pub n_unflagged: usize,
    pub flags: Vec<FlagSummary>,
}

impl Summary {
    fn of(records: &[EstimatorRecord]) -> Self {
        let flags: Vec<FlagSummary> = records
            .iter()
            .filter_map(|r| r.pass.map(|p| FlagSummary { index: r.index, kind: r.kind.clone(), pass: p }))
            .collect();
        let n_pass = flags.iter().filter(|f| f.pass).count();
        Summary {
            all_pass: n_pass == flags.len(),
            n_pass,
            n_fail: flags.len() - n_pass,
            n_unflagged: records.len() - flags.len(),
            flags,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    /// Effective config, including command-line overrides.
    pub config: ScenarioConfig,
    pub constants: Option<Value>,
    pub estimators: Vec<EstimatorRecord>,
    pub summary: Summary,
    pub aborted: Option<String>,
    pub wall_seconds: f64,
}

impl RunReport {
    fn new(command: &str, config: &ScenarioConfig) -> Self {
        RunReport {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            constants: None,
            estimators: vec![],
            summary: Summary::of(&[]),
            aborted: None,
            wall_seconds: 0.0,
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.aborted.is_some() {
            EXIT_ABORT
        } else if self.summary.all_pass {
            EXIT_PASS
        } else {
            EXIT_VIOLATION
        }
    }
}

// ---------------------------------------------------------------------------
// Constants

/// Kinetic metric constants with the finite-n table scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KineticConstants {
    pub params: MetricParams,
    pub scalars: MetricScalars,
    pub n_smooth: Option<u64>,
    pub degenerate: bool,
    pub value_lip_bound: f64,
}

fn kinetic_table(model: &KineticModel, quad_tol: f64, n_smooth: Option<u64>, grid: usize) -> Result<MetricTable> {
    let norm = normalize_kinetic(model)?;
    let l = norm.lipschitz;
    let params = metric_constants(&norm.stiffness, l.l1, l.l2, l.r)?;
    build_metric_with(&params, quad_tol, n_smooth, grid)
}

/// Constants of the scenario as JSON: the elliptic report plus any requested
/// Harnack factors, or the kinetic metric constants.
pub fn compute_constants(built: &BuiltScenario, opts: &ConstantsOptions) -> Result<Value> {
    match built {
        BuiltScenario::Elliptic(m) => {
            let s = m.structural;
            let sup_inner = if s.r > 0.0 {
                let p0 = constants::poincare_constant(s.l, s.rho, s.r, m.sigma, m.dim, opts.alpha_ext, 0.0)?;
                Some(constants::sup_inner_drift(m, p0.r_star, opts.sup_resolution)?.value)
            } else {
                None
            };
            let inputs = EllipticInputs {
                l: s.l,
                rho: s.rho,
                r: s.r,
                sigma: m.sigma,
                d: m.dim,
                alpha_ext: opts.alpha_ext,
                sup_inner,
            };
            let report = ConstantsReport::compute(&inputs)?;
            let mut factors = Vec::with_capacity(opts.harnack.len());
            for q in &opts.harnack {
                let f = constants::harnack_factor(q.k_w, m.sigma, q.alpha, q.t, q.dist)?;
                factors.push(json!({ "query": q, "factor": f }));
            }
            Ok(json!({ "elliptic": report, "harnack_factors": factors }))
        }
        BuiltScenario::Kinetic(m) => {
            let table = kinetic_table(m, opts.quad_tol, opts.n_smooth, opts.grid)?;
            let k = KineticConstants {
                params: table.params.clone(),
                scalars: table.scalars,
                n_smooth: table.n_smooth,
                degenerate: table.is_degenerate(),
                value_lip_bound: constants::kinetic_value_lip_bound(&table, m.l_phi),
            };
            Ok(json!({ "kinetic": k }))
        }
        BuiltScenario::Competition(_) => {
            Err(config_err("the competition scenario has no closed-form constants; use verify with `mckv`"))
        }
    }
}

// ---------------------------------------------------------------------------
// Verify

/// One series written next to the report.
struct Series {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

struct Outcome {
    value: Option<f64>,
    bound: Option<f64>,
    pass: Option<bool>,
    result: Value,
    series: Option<Series>,
}

fn sim(dt: f64, horizon: f64, seed: u64) -> Result<SimConfig> {
    SimConfig::new(dt, horizon, seed)
}

fn last(times: &[f64]) -> f64 {
    times[times.len() - 1].max(f64::MIN_POSITIVE)
}

fn elliptic(built: &BuiltScenario) -> &EllipticModel {
    match built {
        BuiltScenario::Elliptic(m) => m,
        _ => unreachable!("family checked by validate_config"),
    }
}

fn competition(built: &BuiltScenario) -> &CompetitionSystem {
    match built {
        BuiltScenario::Competition(c) => c,
        _ => unreachable!("family checked by validate_config"),
    }
}

fn w1_series(r: &est::W1Report) -> Series {
    let env = r.envelope.clone().unwrap_or_else(|| vec![f64::NAN; r.times.len()]);
    Series {
        header: vec!["t".into(), "mean".into(), "stderr".into(), "fit".into(), "envelope".into()],
        rows: (0..r.times.len())
            .map(|j| vec![r.times[j], r.mean[j], r.stderr[j], r.fit.eval(r.times[j]), env[j]])
            .collect(),
    }
}

fn to_value<T: Serialize>(t: &T) -> Result<Value> {
    Ok(serde_json::to_value(t)?)
}

fn run_estimator(spec: &EstimatorSpec, built: &BuiltScenario, seed: u64) -> Result<Outcome> {
    let out = match spec {
        EstimatorSpec::OneSidedProbe { n_pairs, sampler } => {
            let m = elliptic(built);
            let r = probe_one_sided_condition(m, m.structural, sampler, *n_pairs);
            Outcome {
                value: r.far.max,
                bound: Some(-m.structural.rho),
                pass: Some(!r.violated),
                result: to_value(&r)?,
                series: None,
            }
        }
        EstimatorSpec::W1Contraction { coupling, init, times, n, dt, min_rate } => {
            let m = elliptic(built);
            let r = est::w1_contraction(m, *coupling, init, times, &sim(*dt, last(times), seed)?, *n)?;
            let s = m.structural;
            let floor = min_rate.or((*coupling == EllipticCoupling::Synchronous && s.r == 0.0).then_some(s.rho - 0.02));
            let series = Some(w1_series(&r));
            Outcome {
                value: Some(r.fit.kappa_hat),
                bound: floor,
                pass: floor.map(|f| r.fit.kappa_hat >= f),
                result: to_value(&r)?,
                series,
            }
        }
        EstimatorSpec::KineticCoupling { init, times, n, dt, n_smooth, slack } => {
            let BuiltScenario::Kinetic(m) = built else { unreachable!("family checked by validate_config") };
            let norm = normalize_kinetic(m)?;
            let table = kinetic_table(m, 1e-8, Some(*n_smooth), 1024)?;
            let mut c = sim(*dt, last(times), seed)?;
            c.n_smooth = Some(*n_smooth);
            let r = est::kinetic_coupling_check(&norm, &table, init, times, &c, *n, *slack)?;
            let series = Some(w1_series(&r.w1));
            Outcome {
                value: Some(r.w1.fit.kappa_hat),
                bound: Some(r.kappa),
                pass: Some(r.pass),
                result: to_value(&r)?,
                series,
            }
        }
        EstimatorSpec::Coalescence { x0, y0, times, n, dt } => {
            let m = elliptic(built);
            let r = est::coalescence_probability(m, x0, y0, times, &sim(*dt, last(times), seed)?, *n)?;
            let series = Some(Series {
                header: vec!["t".into(), "survival".into(), "stderr".into()],
                rows: (0..r.times.len()).map(|j| vec![r.times[j], r.survival[j], r.stderr[j]]).collect(),
            });
            let pass = r.nonincreasing && r.fit_upper_bounds.unwrap_or(true);
            Outcome {
                value: r.fit.as_ref().map(|f| f.kappa_hat),
                bound: None,
                pass: Some(pass),
                result: to_value(&r)?,
                series,
            }
        }
        EstimatorSpec::ReflectionConstants { x0, y0, times, n, dt } => {
            let m = elliptic(built);
            let r = est::fit_reflection_constants(m, x0, y0, times, &sim(*dt, last(times), seed)?, *n)?;
            let series = Some(w1_series(&r.w1));
            Outcome { value: Some(r.c_prime), bound: None, pass: None, result: to_value(&r)?, series }
        }
        EstimatorSpec::Lyapunov { delta, x0, replicas, samples_per_replica, dt } => {
            let m = elliptic(built);
            let r = est::lyapunov_expectation(m, *delta, x0, *replicas, *samples_per_replica, &sim(*dt, 1.0, seed)?)?;
            Outcome {
                value: Some(r.estimate.value),
                bound: r.estimate.bound,
                pass: r.estimate.pass,
                result: to_value(&r)?,
                series: None,
            }
        }
        EstimatorSpec::Harnack { test_fn, alpha, x, y, t, n, k_w, dt } => {
            let m = elliptic(built);
            let f = |z: &[f64]| test_fn.eval(z);
            let r = est::harnack_check(m, &f, *alpha, x, y, *k_w, &sim(*dt, *t, seed)?, *n)?;
            Outcome { value: Some(r.lhs), bound: Some(r.rhs), pass: Some(r.pass), result: to_value(&r)?, series: None }
        }
        EstimatorSpec::Girsanov { test_fn, x, y, t, n, k_w, dt } => {
            let m = elliptic(built);
            let f = |z: &[f64]| test_fn.eval(z);
            let r = est::girsanov_check(m, &f, x, y, *k_w, &sim(*dt, *t, seed)?, *n)?;
            let (a, b) = (&r.weighted, &r.direct);
            let gap = (a.value - b.value).abs();
            let agree = gap <= est::Z_SCORE * (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
            let pass = agree && r.weight_mean.within(1.0) && r.merge_fraction == 1.0;
            Outcome { value: Some(a.value), bound: None, pass: Some(pass), result: to_value(&r)?, series: None }
        }
        EstimatorSpec::FeynmanKac { x, t, n, dt } => {
            let c = sim(*dt, *t, seed)?;
            let r = match built {
                BuiltScenario::Elliptic(m) => {
                    let fields = derive_elliptic_fields(m, 1e-4)?;
                    let phi = fields.potential.clone();
                    let f = move |z: &[f64]| phi(z);
                    est::feynman_kac_h(&est::elliptic_fk_process(&fields), &f, x, &c, *n)?
                }
                BuiltScenario::Kinetic(m) => {
                    let phi = est::kinetic_fk_potential(m, 1e-4);
                    est::feynman_kac_h(&est::kinetic_fk_process(m), &phi, x, &c, *n)?
                }
                BuiltScenario::Competition(_) => unreachable!("family checked by validate_config"),
            };
            Outcome { value: Some(r.estimate.value), bound: None, pass: None, result: to_value(&r)?, series: None }
        }
        EstimatorSpec::ULipschitzScan { grid, t, n, dt, c_prime, fit } => {
            let c = sim(*dt, *t, seed)?;
            let (r, fitted) = match built {
                BuiltScenario::Elliptic(m) => {
                    let (cp, fitted) = match c_prime {
                        Some(v) => (*v, None),
                        None => {
                            let fs = fit.clone().unwrap_or_else(|| default_fit(m.dim));
                            let fc = sim(fs.dt, last(&fs.times), derive_seed(seed, 1))?;
                            let rc = est::fit_reflection_constants(m, &fs.x0, &fs.y0, &fs.times, &fc, fs.n)?;
                            (rc.c_prime, Some(rc))
                        }
                    };
                    let fields = derive_elliptic_fields(m, 1e-4)?;
                    let phi = fields.potential.clone();
                    let f = move |z: &[f64]| phi(z);
                    let bound = LipBound::Elliptic { m_phi: m.m_phi, l_phi: m.l_phi, c_prime: cp };
                    (est::u_lipschitz_scan(&est::elliptic_fk_process(&fields), &f, grid, &c, *n, bound)?, fitted)
                }
                BuiltScenario::Kinetic(m) => {
                    let table = kinetic_table(m, 1e-8, None, 1024)?;
                    let bound = LipBound::Kinetic { lip: constants::kinetic_value_lip_bound(&table, m.l_phi) };
                    let phi = est::kinetic_fk_potential(m, 1e-4);
                    (est::u_lipschitz_scan(&est::kinetic_fk_process(m), &phi, grid, &c, *n, bound)?, None)
                }
                BuiltScenario::Competition(_) => unreachable!("family checked by validate_config"),
            };
            let series = Some(Series {
                header: vec!["point".into(), "u".into(), "u_se".into()],
                rows: r.points.iter().enumerate().map(|(i, p)| vec![i as f64, p.u, p.u_se]).collect(),
            });
            Outcome {
                value: r.worst.as_ref().map(|w| w.margin),
                bound: Some(0.0),
                pass: Some(r.pass),
                result: json!({ "scan": r, "fitted_constants": fitted }),
                series,
            }
        }
        EstimatorSpec::Hypercontractivity { test_fn, alpha, beta, t, n_outer, n_inner, x0, dt } => {
            let m = elliptic(built);
            let t0 = constants::hyper_t0(m.structural.rho, m.sigma, *alpha, *beta);
            let t = t.unwrap_or(2.0 * t0);
            let f = |z: &[f64]| test_fn.eval(z);
            let r =
                est::hypercontractivity_probe(m, &f, *alpha, *beta, t, *n_outer, *n_inner, x0, &sim(*dt, 1.0, seed)?)?;
            Outcome {
                value: Some(r.estimate.value),
                bound: r.estimate.bound,
                pass: r.estimate.pass,
                result: to_value(&r)?,
                series: None,
            }
        }
        EstimatorSpec::HyperBound { alpha, beta, t } => {
            let m = elliptic(built);
            let s = m.structural;
            let (t0, b) =
                constants::hypercontractivity_bound(s.l.max(0.0), s.rho, s.r, m.sigma, m.dim, *alpha, *beta, *t)?;
            Outcome {
                value: Some(b),
                bound: None,
                pass: None,
                result: json!({ "t": t, "t0": t0, "bound": b }),
                series: None,
            }
        }
        EstimatorSpec::DefectiveLsi { test_fn, n, x0, dt } => {
            let m = elliptic(built);
            let s = m.structural;
            let (a, b) = constants::defective_lsi_constants(s.l, s.rho, s.r, m.sigma, m.dim)?;
            let f = |z: &[f64]| test_fn.eval(z);
            let g = |z: &[f64], o: &mut [f64]| test_fn.grad(z, o);
            let r = est::defective_lsi_check(m, &f, &g, a, b, *n, x0, &sim(*dt, 1.0, seed)?)?;
            Outcome {
                value: Some(r.lhs.value),
                bound: Some(r.rhs.value),
                pass: Some(r.pass),
                result: to_value(&r)?,
                series: None,
            }
        }
        EstimatorSpec::Mckv { n_particles, n_iters, t_iter, dt } => {
            let sys = competition(built);
            let cfg = MckvConfig {
                n_particles: *n_particles,
                n_iters: *n_iters,
                t_iter: *t_iter,
                dt: *dt,
                seed,
                w2_subsample: 256,
                w2_draws: 8,
            };
            let r = est::mckv_fixed_point(sys, &cfg)?;
            let last_d = *r.distances.last().expect("n_iters > 0");
            let pass = r.decay_condition.pass && last_d <= 3.0 * r.sampling_scale;
            let series = Some(Series {
                header: vec!["iteration".into(), "w2".into()],
                rows: r.distances.iter().enumerate().map(|(k, d)| vec![k as f64, *d]).collect(),
            });
            let mut v = to_value(&r)?;
            if let Value::Object(o) = &mut v {
                o.remove("particles");
            }
            Outcome { value: Some(last_d), bound: Some(3.0 * r.sampling_scale), pass: Some(pass), result: v, series }
        }
    };
    Ok(out)
}

fn default_fit(dim: usize) -> FitSpec {
    let mut x0 = vec![0.0; dim];
    let mut y0 = vec![0.0; dim];
    x0[0] = 0.5;
    y0[0] = -0.5;
    FitSpec { x0, y0, times: (1..=12).map(|k| 0.25 * k as f64).collect(), n: 2000, dt: 1e-2 }
}

fn write_series(path: &Path, s: &Series) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&s.header)?;
    for r in &s.rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join("report.json"))?;
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Runs the estimator battery. Stops at the first estimator error and
/// returns the partial report with `aborted` set. CSV series go to `dir`.
pub fn cmd_verify(cfg: &ScenarioConfig, built: &BuiltScenario, dir: Option<&Path>) -> Result<RunReport> {
    let start = Instant::now();
    let mut report = RunReport::new("verify", cfg);
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    for (i, spec) in cfg.estimators.iter().enumerate() {
        let seed = derive_seed(cfg.seed, i as u64);
        let t = Instant::now();
        match run_estimator(spec, built, seed) {
            Ok(o) => {
                if let (Some(d), Some(s)) = (dir, &o.series) {
                    write_series(&d.join(format!("{i:02}_{}.csv", spec.kind())), s)?;
                }
                report.estimators.push(EstimatorRecord {
                    index: i,
                    kind: spec.kind().into(),
                    seed,
                    value: o.value,
                    bound: o.bound,
                    pass: o.pass,
                    wall_seconds: t.elapsed().as_secs_f64(),
                    result: o.result,
                });
            }
            Err(e) => {
                report.aborted = Some(format!("estimator {i} ({}): {e}", spec.kind()));
                break;
            }
        }
    }
    report.summary = Summary::of(&report.estimators);
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

pub fn cmd_constants(cfg: &ScenarioConfig, built: &BuiltScenario) -> Result<RunReport> {
    let start = Instant::now();
    let mut report = RunReport::new("constants", cfg);
    report.constants = Some(compute_constants(built, &cfg.constants)?);
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Sets `value` at `pointer` in `base`, creating nothing.
pub fn apply_pointer(base: &Value, pointer: &str, value: &Value) -> Result<Value> {
    let mut v = base.clone();
    match v.pointer_mut(pointer) {
        Some(slot) => *slot = value.clone(),
        None => return Err(config_err(format!("sweep pointer `{pointer}` does not exist in the config"))),
    }
    Ok(v)
}

/// One row of the sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: usize,
    pub value: Value,
    pub exit_code: i32,
    pub error: Option<String>,
    pub report: Option<RunReport>,
}

/// Runs each grid point. A failing point is recorded and the sweep goes on.
pub fn cmd_sweep(cfg: &ScenarioConfig, dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    let spec = cfg.sweep.clone().ok_or_else(|| config_err("`sweep` block is missing"))?;
    if spec.values.is_empty() {
        return Err(config_err("sweep grid is empty"));
    }
    let mut base = serde_json::to_value(cfg)?;
    if let Value::Object(o) = &mut base {
        o.remove("sweep");
    }
    let mut rows = Vec::with_capacity(spec.values.len());
    for (i, val) in spec.values.iter().enumerate() {
        let sub = dir.map(|d| d.join(format!("point_{i:03}")));
        let run = || -> Result<RunReport> {
            let v = apply_pointer(&base, &spec.pointer, val)?;
            let c: ScenarioConfig = serde_json::from_value(v).map_err(|e| config_err(e.to_string()))?;
            let built = validate_config(&c)?;
            let r = match spec.command {
                SweepCommand::Verify => cmd_verify(&c, &built, sub.as_deref())?,
                SweepCommand::Constants => cmd_constants(&c, &built)?,
            };
            if let Some(d) = &sub {
                write_report(d, &r)?;
            }
            Ok(r)
        };
        rows.push(match run() {
            Ok(r) => SweepRow {
                point: i,
                value: val.clone(),
                exit_code: r.exit_code(),
                error: r.aborted.clone(),
                report: Some(r),
            },
            Err(e) => SweepRow {
                point: i,
                value: val.clone(),
                exit_code: exit_code_of(&e),
                error: Some(e.to_string()),
                report: None,
            },
        });
    }
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        write_sweep_summary(&d.join("summary.csv"), &spec.pointer, &rows)?;
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Columns: `point`, the swept pointer, `exit_code`, `all_pass`, `error`,
/// then `e{i}_{kind}_{value,bound,pass}` for each estimator.
pub fn write_sweep_summary(path: &Path, pointer: &str, rows: &[SweepRow]) -> Result<()> {
    let width = rows.iter().filter_map(|r| r.report.as_ref()).map(|r| r.estimators.len()).max().unwrap_or(0);
    let kinds: Vec<String> = (0..width)
        .map(|i| {
            rows.iter()
                .filter_map(|r| r.report.as_ref().and_then(|rep| rep.estimators.get(i)))
                .map(|e| e.kind.clone())
                .next()
                .unwrap_or_default()
        })
        .collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header =
        vec!["point".to_string(), pointer.to_string(), "exit_code".into(), "all_pass".into(), "error".into()];
    for (i, k) in kinds.iter().enumerate() {
        for col in ["value", "bound", "pass"] {
            header.push(format!("e{i}_{k}_{col}"));
        }
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.point.to_string(),
            r.value.to_string(),
            r.exit_code.to_string(),
            r.report.as_ref().map(|x| x.summary.all_pass.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ];
        for i in 0..width {
            match r.report.as_ref().and_then(|x| x.estimators.get(i)) {
                Some(e) => {
                    rec.extend([fmt_opt(e.value), fmt_opt(e.bound), e.pass.map(|p| p.to_string()).unwrap_or_default()])
                }
                None => rec.extend([String::new(), String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Simulates the coupling of the `dump` block and writes it with
/// [`simulate::write_pair_csv`].
pub fn cmd_dump(cfg: &ScenarioConfig, built: &BuiltScenario, dir: &Path) -> Result<PathBuf> {
    let spec = cfg.dump.clone().ok_or_else(|| config_err("`dump` block is missing"))?;
    let mut c = SimConfig::new(spec.dt, spec.horizon, cfg.seed)?.with_record(Record::Stride(spec.stride.max(1)));
    let pairs = match (spec.coupling, built) {
        (DumpCoupling::Kinetic, BuiltScenario::Kinetic(m)) => {
            let norm = normalize_kinetic(m)?;
            let table = kinetic_table(m, 1e-8, Some(spec.n_smooth), 1024)?;
            c.n_smooth = Some(spec.n_smooth);
            simulate::ensemble(spec.n_paths, |p| {
                Ok((
                    p,
                    simulate::kinetic_coupled_pair(&norm, &table, &table.params, &spec.x0, &spec.y0, &c.with_path(p))?,
                ))
            })?
        }
        (DumpCoupling::Kinetic, _) => return Err(config_err("kinetic dump needs the kinetic-quadratic scenario")),
        (kind, BuiltScenario::Elliptic(m)) => simulate::ensemble(spec.n_paths, |p| {
            let cp = c.with_path(p);
            let tr = match kind {
                DumpCoupling::Synchronous => simulate::synchronous_pair(m, &spec.x0, &spec.y0, &cp)?,
                DumpCoupling::Reflection => simulate::reflection_pair(m, &spec.x0, &spec.y0, &cp)?,
                _ => simulate::harnack_pair(m, &spec.x0, &spec.y0, spec.k_w, &cp)?,
            };
            Ok((p, tr))
        })?,
        _ => return Err(config_err("elliptic couplings need an elliptic scenario")),
    };
    fs::create_dir_all(dir)?;
    let path = dir.join("trajectories.csv");
    simulate::write_pair_csv(fs::File::create(&path)?, &pairs)?;
    Ok(path)
}

/// Maps a library error to the exit-code contract.
pub fn exit_code_of(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::UnknownScenario(_)
        | Error::InvalidParameter { .. }
        | Error::DimensionMismatch { .. }
        | Error::MissingComponent(_)
        | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_ABORT,
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match run_inner(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_of(&e)
        }
    }
}

fn run_inner(cli: &Cli) -> Result<i32> {
    let path = cli.config.as_ref().ok_or_else(|| config_err("--config <path> is required"))?;
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let built = validate_config(&cfg)?;
    if cli.command == Command::Sweep && cfg.sweep.is_none() {
        return Err(config_err("`sweep` block is missing"));
    }
    if cli.command == Command::DumpTrajectories && cfg.dump.is_none() {
        return Err(config_err("`dump` block is missing"));
    }
    if cli.dry_run {
        println!("config ok: scenario `{}`, {} estimator(s)", cfg.scenario.name(), cfg.estimators.len());
        return Ok(EXIT_PASS);
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| config_err(format!("thread pool: {e}")))?;
    }
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("nesslsi-out"));
    cfg.out = Some(out.clone());
    match cli.command {
        Command::Constants => {
            let r = cmd_constants(&cfg, &built)?;
            write_report(&out, &r)?;
            println!("{}", serde_json::to_string_pretty(&r.constants)?);
            Ok(EXIT_PASS)
        }
        Command::Verify => {
            let r = cmd_verify(&cfg, &built, Some(&out))?;
            write_report(&out, &r)?;
            for rec in &r.estimators {
                let flag = match rec.pass {
                    Some(true) => "PASS",
                    Some(false) => "FAIL",
                    None => "----",
                };
                println!(
                    "{flag} {:>2} {:<22} value={} bound={}",
                    rec.index,
                    rec.kind,
                    fmt_opt(rec.value),
                    fmt_opt(rec.bound)
                );
            }
            if let Some(a) = &r.aborted {
                eprintln!("aborted: {a}");
            }
            Ok(r.exit_code())
        }
        Command::Sweep => {
            let rows = cmd_sweep(&cfg, Some(&out))?;
            for r in &rows {
                println!("point {} {} -> exit {}", r.point, r.value, r.exit_code);
            }
            Ok(rows.iter().map(|r| r.exit_code).max().unwrap_or(EXIT_PASS))
        }
        Command::DumpTrajectories => {
            let p = cmd_dump(&cfg, &built, &out)?;
            println!("{}", p.display());
            Ok(EXIT_PASS)
        }
    }
}
