//! Monte Carlo checks of the contraction, coalescence, Lyapunov, Harnack,
//! Feynman–Kac, hypercontractivity and defective-LSI inequalities, and the
//! McKean–Vlasov particle fixed point.
//!
//! Replica `i` of an estimator run with seed `s` always uses path index `i`
//! (or a salted seed from [`derive_seed`]), and every reduction runs in path
//! order, so reports are bit-reproducible from `(seed, config)` whatever the
//! thread count.

use std::f64::consts::SQRT_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{self, LyapunovQuery};
use crate::error::{Error, Result};
use crate::metric::{rho_star, MetricTable};
use crate::models::scenarios::CompetitionSystem;
use crate::models::{
    dist, make_competition_drift, norm, CompetitionDrift, DerivedEllipticFields, EllipticModel, KineticModel,
    NormalizedKineticModel,
};
use crate::rng::{derive_seed, Channel, NoiseStream};
use crate::simulate::{
    em_path, em_update, ensemble, harnack_pair, kinetic_coupled_pair, reflection_pair, synchronous_pair, CouplingKind,
    Diffusion, FnDiffusion, Record, SimConfig,
};

/// Width of every reported confidence band, in standard errors.
pub const Z_SCORE: f64 = 3.0;
/// Smallest ensemble accepted by the coupling estimators.
pub const MIN_ENSEMBLE: usize = 1000;
/// Inner sample size below which the nested estimator warns about bias.
pub const MIN_INNER: usize = 1000;
/// Largest admissible Feynman–Kac exponent before `exp` overflows.
pub const MAX_EXPONENT: f64 = 700.0;

const SALT_INDEPENDENT: u64 = 0x1d;
const SALT_INNER: u64 = 0x2e;
const SALT_SUBSAMPLE: u64 = 0x3f;

/// Real test function on the state space.
pub type TestFn<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);
/// Gradient of a test function.
pub type GradFn<'a> = &'a (dyn Fn(&[f64], &mut [f64]) + Sync);

// ---------------------------------------------------------------------------
// Estimates and fits

/// Point estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub value: f64,
    pub stderr: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// `Z_SCORE · stderr`.
    pub half_width: f64,
    pub bound: Option<f64>,
    /// Set only together with `bound`.
    pub pass: Option<bool>,
}

impl EstimateResult {
    pub fn new(value: f64, stderr: f64, n_samples: usize, seed: u64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Estimator(format!("non-finite estimate {value}")));
        }
        if !(stderr >= 0.0 && stderr.is_finite()) {
            return Err(Error::Estimator(format!("invalid standard error {stderr}")));
        }
        Ok(EstimateResult { value, stderr, n_samples, seed, half_width: Z_SCORE * stderr, bound: None, pass: None })
    }

    pub fn from_samples(samples: &[f64], seed: u64) -> Result<Self> {
        let (m, se) = mean_se(samples)?;
        Self::new(m, se, samples.len(), seed)
    }

    /// Attaches `bound` and flags `value ≤ bound + half_width`.
    pub fn with_upper_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self.pass = Some(self.value <= bound + self.half_width);
        self
    }

    /// `|value - target| ≤ half_width`.
    pub fn within(&self, target: f64) -> bool {
        (self.value - target).abs() <= self.half_width
    }

    /// Distance to `target` in standard errors (0 for an exact match).
    pub fn z_score(&self, target: f64) -> f64 {
        let gap = (self.value - target).abs();
        if gap == 0.0 {
            0.0
        } else {
            gap / self.stderr
        }
    }
}

/// Sample mean and standard error. The sums are shifted by the first sample,
/// so identical samples give a standard error of exactly zero.
pub fn mean_se(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Estimator("no samples".into()));
    }
    if let Some(x) = samples.iter().find(|x| !x.is_finite()) {
        return Err(Error::Estimator(format!("non-finite sample {x}")));
    }
    let k = samples[0];
    let n = samples.len() as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for &x in samples {
        let d = x - k;
        s1 += d;
        s2 += d * d;
    }
    let mean = k + s1 / n;
    if samples.len() < 2 {
        return Ok((mean, 0.0));
    }
    let var = ((s2 - s1 * s1 / n) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

fn column_stats(rows: &[Vec<f64>], k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut mean = Vec::with_capacity(k);
    let mut se = Vec::with_capacity(k);
    let mut col = vec![0.0; rows.len()];
    for j in 0..k {
        for (c, r) in col.iter_mut().zip(rows) {
            *c = r[j];
        }
        let (m, s) = mean_se(&col)?;
        mean.push(m);
        se.push(s);
    }
    Ok((mean, se))
}

/// Delete-one-batch jackknife of `stat(column means)` over contiguous batches.
/// Returns the full-sample statistic and its standard error.
pub fn batch_jackknife(rows: &[Vec<f64>], batches: usize, stat: impl Fn(&[f64]) -> f64) -> Result<(f64, f64)> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Estimator("no samples".into()));
    }
    let k = rows[0].len();
    let b = batches.clamp(2, n.max(2));
    if n < 2 {
        let v = stat(&rows[0]);
        return Ok((v, 0.0));
    }
    let mut totals = vec![0.0; k];
    let mut sums = vec![vec![0.0; k]; b];
    let mut counts = vec![0usize; b];
    for (i, r) in rows.iter().enumerate() {
        let g = i * b / n;
        counts[g] += 1;
        for j in 0..k {
            sums[g][j] += r[j];
            totals[j] += r[j];
        }
    }
    let full: Vec<f64> = totals.iter().map(|t| t / n as f64).collect();
    let value = stat(&full);
    let mut reps = Vec::with_capacity(b);
    let mut m = vec![0.0; k];
    for g in 0..b {
        let rest = (n - counts[g]) as f64;
        for j in 0..k {
            m[j] = (totals[j] - sums[g][j]) / rest;
        }
        reps.push(stat(&m));
    }
    let bar = reps.iter().sum::<f64>() / b as f64;
    let var = (b as f64 - 1.0) / b as f64 * reps.iter().map(|r| (r - bar) * (r - bar)).sum::<f64>();
    if !value.is_finite() || !var.is_finite() {
        return Err(Error::Estimator("jackknife statistic is not finite".into()));
    }
    Ok((value, var.sqrt()))
}

/// Log-linear fit `ln m_t ≈ ln Ĉ - κ̂ t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub c_hat: f64,
    pub kappa_hat: f64,
    /// Root-mean-square residual of `ln m_t`.
    pub residual: f64,
    pub window: (f64, f64),
    /// Smallest `C` with `m_t ≤ C e^{-κ̂t}` on every fitted point.
    pub envelope_c: f64,
    pub n_points: usize,
}

impl RateFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.c_hat * (-self.kappa_hat * t).exp()
    }

    pub fn envelope(&self, t: f64) -> f64 {
        self.envelope_c * (-self.kappa_hat * t).exp()
    }
}

pub fn fit_exponential_rate(series: &[(f64, f64)]) -> Result<RateFit> {
    if series.len() < 3 {
        return Err(Error::param("series", "need at least three points"));
    }
    for &(t, m) in series {
        if !t.is_finite() {
            return Err(Error::NonFinite("fit time"));
        }
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::Estimator(format!("nonpositive mean {m} at t = {t}")));
        }
    }
    let n = series.len() as f64;
    let tb = series.iter().map(|p| p.0).sum::<f64>() / n;
    let yb = series.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let stt: f64 = series.iter().map(|p| (p.0 - tb) * (p.0 - tb)).sum();
    if stt == 0.0 {
        return Err(Error::param("series", "times must not all coincide"));
    }
    let sty: f64 = series.iter().map(|p| (p.0 - tb) * (p.1.ln() - yb)).sum();
    let slope = sty / stt;
    let lnc = yb - slope * tb;
    let kappa = -slope;
    let residual = (series
        .iter()
        .map(|p| {
            let r = p.1.ln() - lnc - slope * p.0;
            r * r
        })
        .sum::<f64>()
        / n)
        .sqrt();
    let envelope_c = series.iter().map(|p| p.1 * (kappa * p.0).exp()).fold(0.0, f64::max);
    let lo = series.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = series.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    Ok(RateFit { c_hat: lnc.exp(), kappa_hat: kappa, residual, window: (lo, hi), envelope_c, n_points: series.len() })
}

fn fit_positive(times: &[f64], means: &[f64]) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = times.iter().zip(means).filter(|(_, m)| **m > 0.0).map(|(t, m)| (*t, *m)).collect();
    if pts.len() < 3 {
        return Err(Error::Estimator(format!("insufficient coalescence: {} positive means, need three", pts.len())));
    }
    fit_exponential_rate(&pts)
}

fn check_times(times: &[f64], horizon: f64) -> Result<()> {
    if times.is_empty() {
        return Err(Error::param("times", "must not be empty"));
    }
    if times.iter().any(|t| !(*t >= 0.0 && *t <= horizon * (1.0 + 1e-12))) {
        return Err(Error::param("times", "must lie in [0, T]"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::param("times", "must be strictly increasing"));
    }
    Ok(())
}

fn check_ensemble(n: usize) -> Result<()> {
    if n < MIN_ENSEMBLE {
        return Err(Error::param("N", format!("ensemble needs at least {MIN_ENSEMBLE} paths, got {n}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Couplings

/// Law of the initial pair `(Z₀, Z₀')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "law", deny_unknown_fields)]
pub enum InitialPair {
    Fixed {
        x: Vec<f64>,
        y: Vec<f64>,
    },
    /// Independent `N(x, std²I)` and `N(y, std²I)`.
    Gaussian {
        x: Vec<f64>,
        y: Vec<f64>,
        std: f64,
    },
}

impl InitialPair {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let (x, y) = match self {
            InitialPair::Fixed { x, y } => (x, y),
            InitialPair::Gaussian { x, y, std } => {
                if !(*std >= 0.0 && std.is_finite()) {
                    return Err(Error::param("std", "must be nonnegative"));
                }
                (x, y)
            }
        };
        crate::models::check_dim(dim, x.len())?;
        crate::models::check_dim(dim, y.len())?;
        if x.iter().chain(y).any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("initial pair"));
        }
        Ok(())
    }

    /// Draws the pair of replica `path` from [`Channel::Sampling`].
    pub fn sample(&self, seed: u64, path: u64) -> (Vec<f64>, Vec<f64>) {
        match self {
            InitialPair::Fixed { x, y } => (x.clone(), y.clone()),
            InitialPair::Gaussian { x, y, std } => {
                let mut s = NoiseStream::new(seed, path, Channel::Sampling);
                let a = x.iter().map(|c| c + std * s.normal()).collect();
                let b = y.iter().map(|c| c + std * s.normal()).collect();
                (a, b)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllipticCoupling {
    Synchronous,
    Reflection,
}

/// Mean separation curve of a coupling and its exponential fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W1Report {
    pub coupling: CouplingKind,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub fit: RateFit,
    pub n_paths: usize,
    pub seed: u64,
    /// Theoretical envelope on the same grid, when one applies.
    pub envelope: Option<Vec<f64>>,
    pub pass: Option<bool>,
}

struct ReflectionRun {
    seps: Vec<f64>,
    tau: Option<f64>,
}

fn elliptic_runs(
    model: &EllipticModel,
    coupling: EllipticCoupling,
    init: &InitialPair,
    times: &[f64],
    cfg: &SimConfig,
    n: usize,
) -> Result<Vec<ReflectionRun>> {
    check_ensemble(n)?;
    check_times(times, cfg.horizon)?;
    init.validate(model.dim)?;
    let mut cfg = cfg.with_record(Record::Times(times.to_vec()));
    cfg.stop_on_merge = false;
    cfg.validate()?;
    ensemble(n, |path| {
        let c = cfg.with_path(path);
        let (x0, y0) = init.sample(cfg.seed, path);
        let tr = match coupling {
            EllipticCoupling::Synchronous => synchronous_pair(model, &x0, &y0, &c)?,
            EllipticCoupling::Reflection => reflection_pair(model, &x0, &y0, &c)?,
        };
        Ok(ReflectionRun { seps: tr.separations(), tau: tr.tau })
    })
}

/// `E|Z_t - Z'_t|` on `times` under a synchronous or reflection coupling.
pub fn w1_contraction(
    model: &EllipticModel,
    coupling: EllipticCoupling,
    init: &InitialPair,
    times: &[f64],
    cfg: &SimConfig,
    n: usize,
) -> Result<W1Report> {
    let runs = elliptic_runs(model, coupling, init, times, cfg, n)?;
    w1_report(&runs, coupling, times, cfg.seed)
}

fn w1_report(runs: &[ReflectionRun], coupling: EllipticCoupling, times: &[f64], seed: u64) -> Result<W1Report> {
    let rows: Vec<Vec<f64>> = runs.iter().map(|r| r.seps.clone()).collect();
    let (mean, stderr) = column_stats(&rows, times.len())?;
    let fit = fit_positive(times, &mean)?;
    Ok(W1Report {
        coupling: match coupling {
            EllipticCoupling::Synchronous => CouplingKind::Synchronous,
            EllipticCoupling::Reflection => CouplingKind::Reflection,
        },
        times: times.to_vec(),
        mean,
        stderr,
        fit,
        n_paths: runs.len(),
        seed,
        envelope: None,
        pass: None,
    })
}

/// Two-sample comparison of the `Z'` marginal of the coupling with an
/// independent simulation from the same initial law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    pub times: Vec<f64>,
    /// Per time, per coordinate: `|Δmean| / se`.
    pub z_mean: Vec<Vec<f64>>,
    /// Per time, per coordinate: `|Δ second moment| / se`.
    pub z_second: Vec<Vec<f64>>,
    pub max_z: f64,
    pub pass: bool,
}

/// Kinetic coupling run: separation curve against the `C₁e^{-κt}E[ρ*]`
/// envelope and the marginal check of `Z'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KineticReport {
    pub w1: W1Report,
    pub rho0: EstimateResult,
    pub c1: f64,
    pub kappa: f64,
    pub slack: f64,
    pub marginals: MarginalReport,
    pub pass: bool,
}

/// Simulates the normalized kinetic coupling with `cfg.n_smooth` and
/// compares `E|Z_t - Z'_t|` with `(1 + slack)C₁e^{-κt}E[ρ*(Z₀, Z₀')]`, the
/// constants taken from `table`. Each point may exceed the envelope by
/// `Z_SCORE` combined standard errors.
pub fn kinetic_coupling_check(
    model: &NormalizedKineticModel,
    table: &MetricTable,
    init: &InitialPair,
    times: &[f64],
    cfg: &SimConfig,
    n: usize,
    slack: f64,
) -> Result<KineticReport> {
    check_ensemble(n)?;
    check_times(times, cfg.horizon)?;
    init.validate(2 * model.dim)?;
    if !(slack >= 0.0) {
        return Err(Error::param("slack", "must be nonnegative"));
    }
    let cfg = cfg.with_record(Record::Times(times.to_vec()));
    cfg.validate()?;
    let params = &table.params;
    let k = times.len();
    let coupled = ensemble(n, |path| {
        let (z0, z0p) = init.sample(cfg.seed, path);
        let r0 = rho_star(table, params, &z0, &z0p)?;
        let tr = kinetic_coupled_pair(model, table, params, &z0, &z0p, &cfg.with_path(path))?;
        Ok((r0, tr.separations(), tr.zp))
    })?;
    let ind_seed = derive_seed(cfg.seed, SALT_INDEPENDENT);
    let ind_cfg = SimConfig { seed: ind_seed, ..cfg.clone() };
    let independent = ensemble(n, |path| {
        let (_, z0p) = init.sample(ind_seed, path);
        Ok(em_path(model, &z0p, &ind_cfg.with_path(path))?.states)
    })?;

    let rho0s: Vec<f64> = coupled.iter().map(|c| c.0).collect();
    let rho0 = EstimateResult::from_samples(&rho0s, cfg.seed)?;
    let rows: Vec<Vec<f64>> = coupled.iter().map(|c| c.1.clone()).collect();
    let (mean, stderr) = column_stats(&rows, k)?;
    let fit = fit_positive(times, &mean)?;
    let (c1, kappa) = (table.scalars.c1, table.scalars.kappa);
    let mut envelope = Vec::with_capacity(k);
    let mut pass = true;
    for j in 0..k {
        let e = (1.0 + slack) * c1 * (-kappa * times[j]).exp() * rho0.value;
        let e_se = e / rho0.value * rho0.stderr;
        if mean[j] - e > Z_SCORE * (stderr[j] * stderr[j] + e_se * e_se).sqrt() {
            pass = false;
        }
        envelope.push(e);
    }
    let w1 = W1Report {
        coupling: CouplingKind::Kinetic,
        times: times.to_vec(),
        mean,
        stderr,
        fit,
        n_paths: n,
        seed: cfg.seed,
        envelope: Some(envelope),
        pass: Some(pass),
    };

    let dim = 2 * model.dim;
    let (mut z_mean, mut z_second) = (Vec::with_capacity(k), Vec::with_capacity(k));
    let mut max_z = 0.0_f64;
    let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
    for j in 0..k {
        let (mut zm, mut zs) = (Vec::with_capacity(dim), Vec::with_capacity(dim));
        for c in 0..dim {
            for power in [1, 2] {
                for p in 0..n {
                    a[p] = coupled[p].2[j][c].powi(power);
                    b[p] = independent[p][j][c].powi(power);
                }
                let (ma, sa) = mean_se(&a)?;
                let (mb, sb) = mean_se(&b)?;
                let gap = (ma - mb).abs();
                let z = if gap == 0.0 { 0.0 } else { gap / (sa * sa + sb * sb).sqrt() };
                max_z = max_z.max(z);
                if power == 1 {
                    zm.push(z);
                } else {
                    zs.push(z);
                }
            }
        }
        z_mean.push(zm);
        z_second.push(zs);
    }
    let marginals = MarginalReport { times: times.to_vec(), z_mean, z_second, max_z, pass: max_z <= Z_SCORE };
    let pass = pass && marginals.pass;
    Ok(KineticReport { w1, rho0, c1, kappa, slack, marginals, pass })
}

/// Non-merge curve `t ↦ P[X_t ≠ Y_t]` of the reflection coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalescenceReport {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    /// Fit of `t·P[τ > t] ≈ Ĉe^{-κ̂t}` on the points with positive survival.
    pub fit: Option<RateFit>,
    /// Whether `κ̂ > 0` and the envelope `C e^{-κ̂t}/t + 3σ` stays above the
    /// curve on the fit window.
    pub fit_upper_bounds: Option<bool>,
    pub nonincreasing: bool,
}

fn coalescence_report(taus: &[Option<f64>], times: &[f64], seed: u64) -> CoalescenceReport {
    let n = taus.len() as f64;
    let survival: Vec<f64> =
        times.iter().map(|&t| taus.iter().filter(|tau| tau.is_none_or(|s| s > t)).count() as f64 / n).collect();
    let stderr: Vec<f64> = survival.iter().map(|p| (p * (1.0 - p) / n).sqrt()).collect();
    let pts: Vec<(f64, f64)> =
        times.iter().zip(&survival).filter(|(t, p)| **t > 0.0 && **p > 0.0).map(|(t, p)| (*t, p * t)).collect();
    let fit = if pts.len() >= 3 { fit_exponential_rate(&pts).ok() } else { None };
    let fit_upper_bounds = fit.as_ref().map(|f| {
        f.kappa_hat > 0.0
            && times.iter().zip(&survival).zip(&stderr).all(|((&t, &p), &s)| {
                t < f.window.0 || t > f.window.1 || t == 0.0 || p <= f.envelope(t) / t + Z_SCORE * s
            })
    });
    let nonincreasing = survival.windows(2).all(|w| w[1] <= w[0]);
    CoalescenceReport {
        times: times.to_vec(),
        survival,
        stderr,
        n_paths: taus.len(),
        seed,
        fit,
        fit_upper_bounds,
        nonincreasing,
    }
}

/// Reflection coupling from `(x₀, y₀)`, stopped at the merge time.
pub fn coalescence_probability(
    model: &EllipticModel,
    x0: &[f64],
    y0: &[f64],
    times: &[f64],
    cfg: &SimConfig,
    n: usize,
) -> Result<CoalescenceReport> {
    check_ensemble(n)?;
    check_times(times, cfg.horizon)?;
    let mut c = cfg.with_record(Record::Final);
    c.stop_on_merge = true;
    c.horizon = times[times.len() - 1].max(c.dt);
    let taus = ensemble(n, |path| Ok(reflection_pair(model, x0, y0, &c.with_path(path))?.tau))?;
    Ok(coalescence_report(&taus, times, cfg.seed))
}

/// Empirical stand-ins for the constants of the reflection-coupling bounds
/// `E|X_t - Y_t| ≤ Ce^{-κt}|x - y|` and `P[X_t ≠ Y_t] ≤ Ce^{-κt}|x - y|/t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionConstants {
    pub w1: W1Report,
    pub coalescence: CoalescenceReport,
    /// Smaller of the two fitted rates.
    pub kappa: f64,
    /// Smallest `C` making both envelopes hold at rate `kappa`.
    pub c: f64,
    /// `C' = C/κ`.
    pub c_prime: f64,
}

pub fn fit_reflection_constants(
    model: &EllipticModel,
    x0: &[f64],
    y0: &[f64],
    times: &[f64],
    cfg: &SimConfig,
    n: usize,
) -> Result<ReflectionConstants> {
    let d0 = dist(x0, y0);
    if !(d0 > 0.0) {
        return Err(Error::param("x0, y0", "must differ"));
    }
    let init = InitialPair::Fixed { x: x0.to_vec(), y: y0.to_vec() };
    let runs = elliptic_runs(model, EllipticCoupling::Reflection, &init, times, cfg, n)?;
    let w1 = w1_report(&runs, EllipticCoupling::Reflection, times, cfg.seed)?;
    let taus: Vec<Option<f64>> = runs.iter().map(|r| r.tau).collect();
    let coalescence = coalescence_report(&taus, times, cfg.seed);
    let mut kappa = w1.fit.kappa_hat;
    if let Some(f) = &coalescence.fit {
        kappa = kappa.min(f.kappa_hat);
    }
    if !(kappa > 0.0) {
        return Err(Error::Estimator(format!("fitted contraction rate {kappa} is not positive")));
    }
    let mut c = 0.0_f64;
    for j in 0..times.len() {
        let t = times[j];
        c = c.max(w1.mean[j] * (kappa * t).exp());
        c = c.max(coalescence.survival[j] * t * (kappa * t).exp());
    }
    c /= d0;
    Ok(ReflectionConstants { w1, coalescence, kappa, c, c_prime: c / kappa })
}

// ---------------------------------------------------------------------------
// Ergodic averages

/// `(burn-in, thinning)` of the ergodic sampler: `10/ρ` and `1/ρ`.
pub fn ergodic_schedule(rho: f64) -> (f64, f64) {
    (10.0 / rho, 1.0 / rho)
}

/// `n` states of one long path of `model` after the burn-in, thinned.
/// Uses `cfg.dt`, `cfg.seed` and the given path index.
pub fn ergodic_sample<M: Diffusion + ?Sized>(
    model: &M,
    rho: f64,
    x0: &[f64],
    n: usize,
    cfg: &SimConfig,
    path: u64,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::param("n", "must be positive"));
    }
    if !(rho > 0.0) {
        return Err(Error::param("rho", "must be positive"));
    }
    let (burn, thin) = ergodic_schedule(rho);
    let thin_steps = ((thin / cfg.dt).round() as usize).max(1);
    let burn_steps = (burn / cfg.dt).ceil() as usize;
    let first = burn_steps.div_ceil(thin_steps) * thin_steps;
    let total = first + (n - 1) * thin_steps;
    let c = SimConfig {
        horizon: total as f64 * cfg.dt,
        path,
        record: Record::Stride(thin_steps),
        stop_on_merge: false,
        ..cfg.clone()
    };
    let tr = em_path(model, x0, &c)?;
    let out: Vec<Vec<f64>> =
        tr.steps.iter().zip(tr.states).filter(|(s, _)| **s >= first).map(|(_, z)| z).take(n).collect();
    if out.len() != n {
        return Err(Error::Estimator(format!("ergodic sampler produced {} of {n} states", out.len())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    /// Estimate of `∬ exp(δ|x - y|²) μ(dx)μ(dy)` with the closed-form bound.
    pub estimate: EstimateResult,
    pub delta: f64,
    pub burn_in: f64,
    pub thinning: f64,
    pub replicas: usize,
    pub samples_per_replica: usize,
}

/// Averages `exp(δ|X - Y|²)` along pairs of independent ergodic paths.
/// The standard error is taken across replicas.
pub fn lyapunov_expectation(
    model: &EllipticModel,
    delta: f64,
    x0: &[f64],
    replicas: usize,
    samples_per_replica: usize,
    cfg: &SimConfig,
) -> Result<LyapunovReport> {
    let s = model.structural;
    let q = LyapunovQuery::new(delta, s.rho)?;
    let bound = constants::lyapunov_bound(s.l.max(0.0), s.rho, s.r, model.dim, q)?;
    if replicas < 2 {
        return Err(Error::param("replicas", "need at least two"));
    }
    let means = ensemble(replicas, |r| {
        let xs = ergodic_sample(model, s.rho, x0, samples_per_replica, cfg, 2 * r)?;
        let ys = ergodic_sample(model, s.rho, x0, samples_per_replica, cfg, 2 * r + 1)?;
        let mut acc = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let d = dist(x, y);
            acc += (delta * d * d).exp();
        }
        let m = acc / samples_per_replica as f64;
        if !m.is_finite() {
            return Err(Error::Estimator(format!("Lyapunov running mean diverged in replica {r}")));
        }
        Ok(m)
    })?;
    let (m, se) = mean_se(&means)?;
    let estimate = EstimateResult::new(m, se, replicas * samples_per_replica, cfg.seed)?.with_upper_bound(bound);
    let (burn_in, thinning) = ergodic_schedule(s.rho);
    Ok(LyapunovReport { estimate, delta, burn_in, thinning, replicas, samples_per_replica })
}

// ---------------------------------------------------------------------------
// Harnack and Girsanov

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnackReport {
    /// `(P_t f(y))^α`.
    pub lhs: f64,
    pub lhs_se: f64,
    /// `P_t f^α(x) · factor`.
    pub rhs: f64,
    pub rhs_se: f64,
    pub factor: f64,
    pub t: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub pass: bool,
}

/// Checks `(P_t f(y))^α ≤ P_t f^α(x) · exp(α(K²t + |x-y|²/t)/(2σ²(α-1)))`
/// with `t = cfg.horizon`. Paths from `x` and `y` share their noise, so the
/// case `x = y` reduces to Jensen's inequality on one empirical measure.
#[allow(clippy::too_many_arguments)]
pub fn harnack_check(
    model: &EllipticModel,
    f: TestFn,
    alpha: f64,
    x: &[f64],
    y: &[f64],
    k_w: f64,
    cfg: &SimConfig,
    n: usize,
) -> Result<HarnackReport> {
    let t = cfg.horizon;
    let factor = constants::harnack_factor(k_w, model.sigma, alpha, t, dist(x, y))?;
    let cfg = cfg.with_record(Record::Final);
    let vals = ensemble(n, |p| {
        let c = cfg.with_path(p);
        let fy = f(em_path(model, y, &c)?.states.last().expect("final state"));
        let fx = f(em_path(model, x, &c)?.states.last().expect("final state"));
        if fy < 0.0 || fx < 0.0 {
            return Err(Error::param("f", "must be nonnegative"));
        }
        Ok((fy, fx.powf(alpha)))
    })?;
    let a: Vec<f64> = vals.iter().map(|v| v.0).collect();
    let b: Vec<f64> = vals.iter().map(|v| v.1).collect();
    let (my, sy) = mean_se(&a)?;
    let (mx, sx) = mean_se(&b)?;
    let lhs = my.powf(alpha);
    let lhs_se = alpha * my.powf(alpha - 1.0) * sy;
    let (rhs, rhs_se) = (mx * factor, sx * factor);
    let pass = lhs <= rhs + Z_SCORE * (lhs_se * lhs_se + rhs_se * rhs_se).sqrt();
    Ok(HarnackReport { lhs, lhs_se, rhs, rhs_se, factor, t, n_paths: n, seed: cfg.seed, pass })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GirsanovReport {
    /// `E[R f(Y_T)]`, an estimate of `P_T f(y)`.
    pub weighted: EstimateResult,
    /// `E[R]`, which should be 1.
    pub weight_mean: EstimateResult,
    /// Plain Monte Carlo `P_T f(y)` on an independent stream.
    pub direct: EstimateResult,
    pub merge_fraction: f64,
    pub n_paths: usize,
}

/// Girsanov coupling from `(x, y)` over `[0, cfg.horizon]`.
#[allow(clippy::too_many_arguments)]
pub fn girsanov_check(
    model: &EllipticModel,
    f: TestFn,
    x: &[f64],
    y: &[f64],
    k_w: f64,
    cfg: &SimConfig,
    n: usize,
) -> Result<GirsanovReport> {
    let cfg = cfg.with_record(Record::Final);
    let direct_cfg = SimConfig { seed: derive_seed(cfg.seed, SALT_INDEPENDENT), ..cfg.clone() };
    let vals = ensemble(n, |p| {
        let tr = harnack_pair(model, x, y, k_w, &cfg.with_path(p))?;
        let w = tr.log_weight.unwrap_or(0.0).exp();
        let fy = f(tr.zp.last().expect("final state"));
        let fd = f(em_path(model, y, &direct_cfg.with_path(p))?.states.last().expect("final state"));
        Ok((w * fy, w, fd, tr.tau.is_some()))
    })?;
    let col = |k: usize| -> Vec<f64> {
        vals.iter()
            .map(|v| match k {
                0 => v.0,
                1 => v.1,
                _ => v.2,
            })
            .collect()
    };
    let merged = vals.iter().filter(|v| v.3).count();
    Ok(GirsanovReport {
        weighted: EstimateResult::from_samples(&col(0), cfg.seed)?,
        weight_mean: EstimateResult::from_samples(&col(1), cfg.seed)?,
        direct: EstimateResult::from_samples(&col(2), direct_cfg.seed)?,
        merge_fraction: merged as f64 / n as f64,
        n_paths: n,
    })
}

// ---------------------------------------------------------------------------
// Feynman–Kac

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FkEstimate {
    /// Estimate of `h_T(x)` with `h₀ ≡ 1`.
    pub estimate: EstimateResult,
    /// Largest path exponent `∫φ ds`.
    pub max_exponent: f64,
    pub horizon: f64,
}

/// `h_T(x) = E[exp(∫₀ᵀ φ(X_s) ds)]` for the process started at `x`, with the
/// integral as a left Riemann sum on the simulation grid.
pub fn feynman_kac_h<M: Diffusion + ?Sized>(
    process: &M,
    phi: TestFn,
    x: &[f64],
    cfg: &SimConfig,
    n: usize,
) -> Result<FkEstimate> {
    cfg.validate()?;
    crate::models::check_dim(process.state_dim(), x.len())?;
    if n == 0 {
        return Err(Error::param("N", "must be positive"));
    }
    let steps = cfg.steps();
    let exps = ensemble(n, |path| {
        let mut noise = NoiseStream::new(cfg.seed, path, Channel::Primary);
        let mut z = x.to_vec();
        let mut b = vec![0.0; z.len()];
        let mut xi = vec![0.0; process.noise_dim()];
        let mut s = 0.0;
        for i in 0..steps {
            let h = cfg.time_of(i + 1) - cfg.time_of(i);
            s += phi(&z) * h;
            noise.fill_normal(&mut xi);
            em_update(process, &mut z, &mut b, h, &xi);
            if !z.iter().all(|c| c.is_finite()) {
                return Err(Error::BlowUp { path, step: i + 1, t: cfg.time_of(i + 1) });
            }
        }
        Ok(s)
    })?;
    let max_exponent = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max_exponent <= MAX_EXPONENT) {
        return Err(Error::Estimator(format!("Feynman–Kac weight overflow: max exponent {max_exponent}")));
    }
    let w: Vec<f64> = exps.iter().map(|s| s.exp()).collect();
    Ok(FkEstimate { estimate: EstimateResult::from_samples(&w, cfg.seed)?, max_exponent, horizon: cfg.horizon })
}

/// `dX = b̃(X) dt + √2 dB`, the process of the elliptic Feynman–Kac formula.
pub fn elliptic_fk_process(fields: &DerivedEllipticFields) -> FnDiffusion<impl Fn(&[f64], &mut [f64]) + Sync> {
    let b = fields.dual_drift.clone();
    FnDiffusion {
        state_dim: fields.dim,
        noise_dim: fields.dim,
        noise_offset: 0,
        noise_scale: SQRT_2,
        drift: move |z: &[f64], o: &mut [f64]| b(z, o),
    }
}

/// The elliptic model with drift `b̃`, unit diffusion and the structural
/// parameters of `model`.
pub fn dual_elliptic_model(model: &EllipticModel, fields: &DerivedEllipticFields) -> Result<EllipticModel> {
    EllipticModel::new("dual", fields.dim, SQRT_2, model.structural, fields.dual_drift.clone())
}

/// `dX = -V dt`, `dV = (-γV + ∇U(X) - G(X, V)) dt + √(2γ) dB`, the process
/// of the kinetic Feynman–Kac formula.
pub fn kinetic_fk_process(model: &KineticModel) -> FnDiffusion<impl Fn(&[f64], &mut [f64]) + Sync> {
    let (gu, g, gamma, d) = (model.grad_u.clone(), model.forcing.clone(), model.gamma, model.dim);
    FnDiffusion {
        state_dim: 2 * d,
        noise_dim: d,
        noise_offset: d,
        noise_scale: (2.0 * gamma).sqrt(),
        drift: move |z: &[f64], o: &mut [f64]| {
            let (x, v) = z.split_at(d);
            let (ox, ov) = o.split_at_mut(d);
            for i in 0..d {
                ox[i] = -v[i];
            }
            gu(x, ov);
            let mut gg = vec![0.0; d];
            g(x, v, &mut gg);
            for i in 0..d {
                ov[i] -= gamma * v[i] + gg[i];
            }
        },
    }
}

/// `φ(x, v) = -∇_v·G + G·v` as a function of `z = (x, v)`.
pub fn kinetic_fk_potential(model: &KineticModel, fd_step: f64) -> impl Fn(&[f64]) -> f64 + Sync + '_ {
    let d = model.dim;
    move |z: &[f64]| model.potential(&z[..d], &z[d..], fd_step)
}

/// Bound inputs of the value-function scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LipBound {
    /// `2M^φt + C'(2M^φ/t + L^φ)|x - y|` at the optimal `t`.
    Elliptic { m_phi: f64, l_phi: f64, c_prime: f64 },
    /// `lip·|z - z'|`.
    Kinetic { lip: f64 },
}

impl LipBound {
    pub fn at(&self, d: f64) -> Result<f64> {
        match *self {
            LipBound::Elliptic { m_phi, l_phi, c_prime } => {
                Ok(constants::perturbation_bound_elliptic(m_phi, l_phi, c_prime, d, None)?.total)
            }
            LipBound::Kinetic { lip } => Ok(lip * d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub x: Vec<f64>,
    pub h: EstimateResult,
    /// `ln ĥ_T(x)`.
    pub u: f64,
    /// Delta-method error `se(ĥ)/ĥ`.
    pub u_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMargin {
    pub i: usize,
    pub j: usize,
    pub dist: f64,
    pub diff: f64,
    pub diff_se: f64,
    pub bound: f64,
    /// `bound + 3σ - |u(x_i) - u(x_j)|`; negative is a violation.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub points: Vec<ScanPoint>,
    pub bound: LipBound,
    pub worst: Option<PairMargin>,
    pub n_pairs: usize,
    pub pass: bool,
}

/// Largest relative standard error of `ĥ` for which `ln ĥ` is trusted.
pub const MAX_REL_SE: f64 = 0.1;

/// Evaluates `u_T = ln h_T` on `grid` (all points share the noise streams)
/// and checks every pair against `bound`.
pub fn u_lipschitz_scan<M: Diffusion + ?Sized>(
    process: &M,
    phi: TestFn,
    grid: &[Vec<f64>],
    cfg: &SimConfig,
    n: usize,
    bound: LipBound,
) -> Result<ScanReport> {
    if grid.is_empty() {
        return Err(Error::param("grid", "must not be empty"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for x in grid {
        let h = feynman_kac_h(process, phi, x, cfg, n)?.estimate;
        let rel = h.stderr / h.value;
        if !(h.value > 0.0) || !(rel < MAX_REL_SE) {
            return Err(Error::Estimator(format!("unstable log: relative standard error {rel} of h_T at {x:?}")));
        }
        points.push(ScanPoint { x: x.clone(), u: h.value.ln(), u_se: rel, h });
    }
    let mut worst: Option<PairMargin> = None;
    let mut n_pairs = 0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = dist(&points[i].x, &points[j].x);
            let b = bound.at(d)?;
            let diff = (points[i].u - points[j].u).abs();
            let se = (points[i].u_se.powi(2) + points[j].u_se.powi(2)).sqrt();
            let margin = b + Z_SCORE * se - diff;
            n_pairs += 1;
            if worst.as_ref().is_none_or(|w| margin < w.margin) {
                worst = Some(PairMargin { i, j, dist: d, diff, diff_se: se, bound: b, margin });
            }
        }
    }
    let pass = worst.as_ref().is_none_or(|w| w.margin >= 0.0);
    Ok(ScanReport { points, bound, worst, n_pairs, pass })
}

/// Split `u = u⋆g^ε + (u - u⋆g^ε)` on a uniform 1-d grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MollifiedSplit {
    /// Largest adjacent difference ratio of `u⋆g^ε`.
    pub lipschitz: f64,
    /// `sup |u - u⋆g^ε|` on the grid.
    pub remainder_sup: f64,
    pub smoothed: Vec<f64>,
}

/// Discrete convolution with the Gaussian of variance `eps`, truncated at
/// 8 standard deviations and renormalized. Values beyond the grid are
/// extended linearly from the two edge points, so affine `u` is reproduced.
pub fn mollified_split(u: &[f64], spacing: f64, eps: f64) -> Result<MollifiedSplit> {
    if u.len() < 2 {
        return Err(Error::param("u", "need at least two grid values"));
    }
    if !(spacing > 0.0) {
        return Err(Error::param("spacing", "must be positive"));
    }
    if !(eps > spacing) {
        return Err(Error::param("eps", format!("must exceed the grid spacing {spacing}")));
    }
    let n = u.len() as isize;
    let sd = eps.sqrt();
    let half = (8.0 * sd / spacing).ceil() as isize;
    let w: Vec<f64> = (-half..=half).map(|k| (-(k as f64 * spacing).powi(2) / (2.0 * eps)).exp()).collect();
    let total: f64 = w.iter().sum();
    let (sl, sr) = (u[1] - u[0], u[(n - 1) as usize] - u[(n - 2) as usize]);
    let ext = |i: isize| -> f64 {
        if i < 0 {
            u[0] + sl * i as f64
        } else if i >= n {
            u[(n - 1) as usize] + sr * (i - n + 1) as f64
        } else {
            u[i as usize]
        }
    };
    let smoothed: Vec<f64> = (0..n)
        .map(|i| {
            // pair symmetric taps so the affine part cancels exactly
            let mut acc = w[half as usize] * ext(i);
            for k in 1..=half {
                acc += w[(half + k) as usize] * (ext(i + k) + ext(i - k));
            }
            acc / total
        })
        .collect();
    let lipschitz = smoothed.windows(2).map(|p| (p[1] - p[0]).abs() / spacing).fold(0.0, f64::max);
    let remainder_sup = u.iter().zip(&smoothed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(MollifiedSplit { lipschitz, remainder_sup, smoothed })
}

// ---------------------------------------------------------------------------
// Hypercontractivity and the defective LSI

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperProbeReport {
    /// Ratio from the plug-in `(P̂_t f)^β`.
    pub plug_in: f64,
    /// Ratio from the per-outer jackknife of `(P̂_t f)^β`, with a batch
    /// jackknife standard error and the bound when `t > t₀`.
    pub estimate: EstimateResult,
    pub alpha: f64,
    pub beta: f64,
    pub t: f64,
    pub t0: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    pub warnings: Vec<String>,
}

/// Nested estimate of `‖P_t f‖_β / ‖f‖_α` under the invariant law:
/// outer points from one ergodic path, `n_inner` paths from each to time `t`.
#[allow(clippy::too_many_arguments)]
pub fn hypercontractivity_probe(
    model: &EllipticModel,
    f: TestFn,
    alpha: f64,
    beta: f64,
    t: f64,
    n_outer: usize,
    n_inner: usize,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<HyperProbeReport> {
    if !(alpha > 1.0 && beta > alpha) {
        return Err(Error::param("alpha/beta", "require beta > alpha > 1"));
    }
    if n_outer < 2 || n_inner < 2 {
        return Err(Error::param("N", "need at least two outer and two inner samples"));
    }
    let s = model.structural;
    let mut warnings = vec![];
    if n_inner < MIN_INNER {
        warnings.push(format!("inner sample size {n_inner} < {MIN_INNER}: the beta-power bias may be visible"));
    }
    let outer = ergodic_sample(model, s.rho, x0, n_outer, cfg, 0)?;
    let inner_cfg = SimConfig {
        seed: derive_seed(cfg.seed, SALT_INNER),
        horizon: t,
        record: Record::Final,
        stop_on_merge: false,
        ..cfg.clone()
    };
    inner_cfg.validate()?;
    let nf = n_inner as f64;
    let rows = ensemble(n_outer, |j| {
        let y = &outer[j as usize];
        let mut vals = Vec::with_capacity(n_inner);
        for k in 0..n_inner {
            let path = j * n_inner as u64 + k as u64;
            let v = f(em_path(model, y, &inner_cfg.with_path(path))?.states.last().expect("final state"));
            if v < 0.0 {
                return Err(Error::param("f", "must be nonnegative"));
            }
            vals.push(v);
        }
        let m = vals.iter().sum::<f64>() / nf;
        let plug = m.powf(beta);
        let loo = vals.iter().map(|v| ((nf * m - v) / (nf - 1.0)).powf(beta)).sum::<f64>() / nf;
        let jack = nf * plug - (nf - 1.0) * loo;
        Ok(vec![jack, f(y).powf(alpha), plug])
    })?;
    let ratio = |m: &[f64]| m[0].max(0.0).powf(1.0 / beta) / m[1].powf(1.0 / alpha);
    let (value, se) = batch_jackknife(&rows, 20, ratio)?;
    let means: Vec<f64> = (0..3).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n_outer as f64).collect();
    let plug_in = means[2].powf(1.0 / beta) / means[1].powf(1.0 / alpha);
    let t0 = constants::hyper_t0(s.rho, model.sigma, alpha, beta);
    let mut estimate = EstimateResult::new(value, se, n_outer * n_inner, cfg.seed)?;
    if t > t0 {
        let (_, bound) =
            constants::hypercontractivity_bound(s.l.max(0.0), s.rho, s.r, model.sigma, model.dim, alpha, beta, t)?;
        estimate = estimate.with_upper_bound(bound);
    }
    Ok(HyperProbeReport { plug_in, estimate, alpha, beta, t, t0, n_outer, n_inner, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsiCheck {
    /// Entropy of the self-normalized `f`.
    pub lhs: EstimateResult,
    /// `A ∫|∇f|²/f dμ + B` for the self-normalized `f`.
    pub rhs: EstimateResult,
    pub a: f64,
    pub b: f64,
    pub pass: bool,
}

/// Checks `Ent_μ(f) ≤ A∫|∇f|²/f dμ + B` on an ergodic sample, normalizing
/// `f` by its sample mean. Standard errors come from a batch jackknife.
#[allow(clippy::too_many_arguments)]
pub fn defective_lsi_check(
    model: &EllipticModel,
    f: TestFn,
    grad_f: GradFn,
    a: f64,
    b: f64,
    n: usize,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<LsiCheck> {
    let sample = ergodic_sample(model, model.structural.rho, x0, n, cfg, 0)?;
    let mut g = vec![0.0; model.dim];
    let mut rows = Vec::with_capacity(n);
    for x in &sample {
        let v = f(x);
        if !(v >= 0.0) {
            return Err(Error::param("f", "must be nonnegative"));
        }
        grad_f(x, &mut g);
        let (flf, fisher) = if v == 0.0 { (0.0, 0.0) } else { (v * v.ln(), g.iter().map(|c| c * c).sum::<f64>() / v) };
        rows.push(vec![v, flf, fisher]);
    }
    let ent = |m: &[f64]| m[1] / m[0] - m[0].ln();
    let energy = |m: &[f64]| a * m[2] / m[0] + b;
    let (l, ls) = batch_jackknife(&rows, 20, ent)?;
    let (r, rs) = batch_jackknife(&rows, 20, energy)?;
    let pass = l <= r + Z_SCORE * (ls * ls + rs * rs).sqrt();
    Ok(LsiCheck {
        lhs: EstimateResult::new(l, ls, n, cfg.seed)?,
        rhs: EstimateResult::new(r, rs, n, cfg.seed)?,
        a,
        b,
        pass,
    })
}

// ---------------------------------------------------------------------------
// McKean–Vlasov

/// `W₂` between two equal-weight empirical measures by exact assignment.
/// Measures larger than `subsample` are compared on `draws` random
/// subsamples of that size and the distances averaged.
pub fn w2_empirical(a: &[Vec<f64>], b: &[Vec<f64>], subsample: usize, draws: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::param("measures", "must be nonempty"));
    }
    if subsample == 0 || draws == 0 {
        return Err(Error::param("subsample", "size and draws must be positive"));
    }
    let exact = |a: &[&Vec<f64>], b: &[&Vec<f64>]| -> Result<f64> {
        let m = a.len();
        let mut cost = Vec::with_capacity(m * m);
        for x in a {
            for y in b {
                let d = dist(x, y);
                cost.push(d * d);
            }
        }
        let (rows, cols) =
            lsap::solve(m, m, &cost, false).map_err(|e| Error::Estimator(format!("assignment failed: {e}")))?;
        let total: f64 = rows.iter().zip(&cols).map(|(i, j)| cost[i * m + j]).sum();
        Ok((total / m as f64).sqrt())
    };
    if a.len() == b.len() && a.len() <= subsample {
        let (ra, rb): (Vec<&Vec<f64>>, Vec<&Vec<f64>>) = (a.iter().collect(), b.iter().collect());
        return exact(&ra, &rb);
    }
    let m = subsample.min(a.len()).min(b.len());
    let mut acc = 0.0;
    for k in 0..draws {
        let mut s = NoiseStream::new(derive_seed(seed, SALT_SUBSAMPLE), k as u64, Channel::Sampling);
        let mut pick = |len: usize| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..len).collect();
            for i in 0..m {
                let j = i + ((s.uniform() * (len - i) as f64) as usize).min(len - i - 1);
                idx.swap(i, j);
            }
            idx.truncate(m);
            idx
        };
        let ia = pick(a.len());
        let ib = pick(b.len());
        let ra: Vec<&Vec<f64>> = ia.iter().map(|&i| &a[i]).collect();
        let rb: Vec<&Vec<f64>> = ib.iter().map(|&i| &b[i]).collect();
        acc += exact(&ra, &rb)?;
    }
    Ok(acc / draws as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayConditionReport {
    /// `max_x |b_μ̂(x)|(1 + |x|)/(1 + ∫|y|μ̂(dy))` over the particles.
    pub max_ratio: f64,
    pub c_prime: f64,
    pub pass: bool,
}

/// Probes `|b_μ(x)| ≤ C'(1 + ∫|y|μ(dy))/(1 + |x|)` at `points`.
pub fn decay_condition_probe(drift: &CompetitionDrift, points: &[Vec<f64>], c_prime: f64) -> DecayConditionReport {
    let mean_abs = drift.particles().iter().map(|y| norm(y)).sum::<f64>() / drift.particles().len() as f64;
    let mut out = vec![0.0; drift.dim()];
    let mut max_ratio = 0.0_f64;
    for x in points {
        drift.eval(x, &mut out);
        max_ratio = max_ratio.max(norm(&out) * (1.0 + norm(x)) / (1.0 + mean_abs));
    }
    DecayConditionReport { max_ratio, c_prime, pass: max_ratio <= c_prime }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MckvConfig {
    pub n_particles: usize,
    pub n_iters: usize,
    /// Simulated time per iteration.
    pub t_iter: f64,
    pub dt: f64,
    pub seed: u64,
    #[serde(default = "default_subsample")]
    pub w2_subsample: usize,
    #[serde(default = "default_draws")]
    pub w2_draws: usize,
}

fn default_subsample() -> usize {
    256
}

fn default_draws() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MckvReport {
    /// `W₂(μ̂_k, μ̂_{k+1})` for `k = 0..n_iters`.
    pub distances: Vec<f64>,
    /// `N^{-1/4}`.
    pub sampling_scale: f64,
    /// Every distance is below `3·N^{-1/4}`.
    pub at_sampling_scale: bool,
    pub non_increasing: bool,
    pub decay_condition: DecayConditionReport,
    pub particles: Vec<Vec<f64>>,
}

/// Fixed-point iteration for the McKean–Vlasov system
/// `dX = (-aX - λ b_μ(X)) dt + σ dB`, `μ = Law(X)`.
///
/// `μ̂₀` is `N` draws from `N(0, 1/a)`. Iteration `k` runs the particles for
/// `t_iter` from those same draws, with the same noise, under the frozen
/// drift of `μ̂_k`, and its end positions form `μ̂_{k+1}`. Sharing the noise
/// makes successive distances reflect the map itself, not resampling.
pub fn mckv_fixed_point(system: &CompetitionSystem, cfg: &MckvConfig) -> Result<MckvReport> {
    let n = cfg.n_particles;
    if n < 64 {
        return Err(Error::param("n_particles", "need at least 64"));
    }
    if cfg.n_iters == 0 {
        return Err(Error::param("n_iters", "must be positive"));
    }
    let sim = SimConfig::new(cfg.dt, cfg.t_iter, cfg.seed)?;
    let dim = system.dim();
    let a = system.confinement;
    if !(a > 0.0) {
        return Err(Error::param("confinement", "must be positive"));
    }
    let sd = 1.0 / a.sqrt();
    let start: Vec<Vec<f64>> = (0..n as u64)
        .map(|i| {
            let mut s = NoiseStream::new(cfg.seed, i, Channel::Sampling);
            (0..dim).map(|_| sd * s.normal()).collect()
        })
        .collect();
    let (lambda, sigma) = (system.lambda, system.sigma);
    let steps = sim.steps();
    let mut current = start.clone();
    let mut distances = Vec::with_capacity(cfg.n_iters);
    for k in 0..cfg.n_iters {
        let frozen = make_competition_drift(&system.kernel, current.clone())?;
        let next: Vec<Vec<f64>> = (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let mut noise = NoiseStream::new(cfg.seed, i, Channel::Primary);
                let mut x = start[i as usize].clone();
                let (mut bm, mut xi) = (vec![0.0; dim], vec![0.0; dim]);
                for s in 0..steps {
                    let h = sim.time_of(s + 1) - sim.time_of(s);
                    noise.fill_normal(&mut xi);
                    frozen.eval(&x, &mut bm);
                    let sh = sigma * h.sqrt();
                    for c in 0..dim {
                        x[c] += (-a * x[c] - lambda * bm[c]) * h + sh * xi[c];
                    }
                    if !x.iter().all(|c| c.is_finite()) {
                        return Err(Error::BlowUp { path: i, step: s + 1, t: sim.time_of(s + 1) });
                    }
                }
                Ok(x)
            })
            .collect::<Result<_>>()?;
        distances.push(w2_empirical(&current, &next, cfg.w2_subsample, cfg.w2_draws, derive_seed(cfg.seed, k as u64))?);
        current = next;
    }
    let sampling_scale = (n as f64).powf(-0.25);
    let at_sampling_scale = distances.iter().all(|d| *d <= 3.0 * sampling_scale);
    let non_increasing = distances.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-12);
    let last = make_competition_drift(&system.kernel, current.clone())?;
    let decay_condition = decay_condition_probe(&last, &current, system.c_prime);
    Ok(MckvReport { distances, sampling_scale, at_sampling_scale, non_increasing, decay_condition, particles: current })
}
