//! Coupling semimetric for the kinetic Langevin contraction.
//!
//! With `r = θ|δx| + |δq|`, `δq = δx + δv`, the semimetric is
//! `ρ(z, z') = ε G(z, z') + f(r)` where `G` is the quadratic Lyapunov form
//! and `f` is a concave profile built from `φ(u) = exp(-θu²/8)`:
//!
//! ```text
//! Φ(r) = ∫₀^r φ
//! g(r) = 1 - (κ₁/2) ∫₀^r Φ/φ - (ε/2) ∫₀^r [(1 + κ₁/2)θu² + 4]/φ
//! f(r) = ∫₀^{min(r, r_end)} φ g
//! ```
//!
//! `r_end = r₀ + 1/n` for a finite smoothing index `n` and `r₀` in the limit.

use std::f64::consts::SQRT_2;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::spectrum;

pub const DEFAULT_QUAD_TOL: f64 = 1e-10;
pub const DEFAULT_GRID: usize = 4096;

/// Closed-form constants of the coupling construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    pub theta: f64,
    pub eta: f64,
    pub lambda: f64,
    pub r0: f64,
    pub kappa2: f64,
    /// Smallest eigenvalue of `K`.
    pub k: f64,
    /// Operator norm of `K`.
    pub k_norm: f64,
    pub l1: f64,
    pub l2: f64,
    pub r: f64,
    pub dim: usize,
    /// `K`, row-major.
    pub stiffness: Vec<f64>,
}

/// Computes the metric constants from `K`, `L₁`, `L₂` and `R`.
///
/// Requires `L₂ ≤ L₁` and the strict admissibility `L₂ < min(1, k)/19`.
pub fn metric_constants(k: &DMatrix<f64>, l1: f64, l2: f64, r: f64) -> Result<MetricParams> {
    let (k_min, k_norm) = spectrum(k)?;
    if !(k_min > 0.0) {
        return Err(Error::param("K", format!("must be positive-definite (smallest eigenvalue {k_min})")));
    }
    if !(l2 >= 0.0) || !(l1 >= l2) || !l1.is_finite() {
        return Err(Error::param("L1/L2", "require 0 <= L2 <= L1 < inf"));
    }
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::param("R", "must be finite and nonnegative"));
    }
    let m = k_min.min(1.0);
    if l2 >= m / 19.0 {
        return Err(Error::Inadmissible(format!("L2 = {l2} must be < min(1, k)/19 = {}", m / 19.0)));
    }
    let theta = 2.0 * (k_norm + l1).max(1.0);
    let kappa2 = (m - 19.0 * l2) * k_min / (8.0 * (1.0 - l2).max(k_min - l2) * k_norm.max(1.0));
    Ok(MetricParams {
        theta,
        eta: 0.5 * m,
        lambda: 0.25 * m,
        r0: (theta + 1.0) * r,
        kappa2,
        k: k_min,
        k_norm,
        l1,
        l2,
        r,
        dim: k.nrows(),
        stiffness: k.transpose().iter().copied().collect(),
    })
}

/// `G = ½δxᵀKδx + ½|δv|² + η δx·δv`.
pub fn g_quadratic(params: &MetricParams, k: &DMatrix<f64>, dx: &[f64], dv: &[f64]) -> Result<f64> {
    let d = k.nrows();
    if dx.len() != d || dv.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: dx.len().max(dv.len()) });
    }
    Ok(g_form(&params.stiffness, params.eta, dx, dv))
}

fn g_form(k_rows: &[f64], eta: f64, dx: &[f64], dv: &[f64]) -> f64 {
    let d = dx.len();
    let mut kx = 0.0;
    let mut vv = 0.0;
    let mut xv = 0.0;
    for i in 0..d {
        let row = &k_rows[i * d..(i + 1) * d];
        kx += dx[i] * row.iter().zip(dx).map(|(a, b)| a * b).sum::<f64>();
        vv += dv[i] * dv[i];
        xv += dx[i] * dv[i];
    }
    0.5 * kx + 0.5 * vv + eta * xv
}

/// Adaptive Simpson quadrature to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 48)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let err = left + right - whole;
    if !err.is_finite() {
        return Err(Error::Quadrature { a, b });
    }
    if err.abs() <= 15.0 * tol {
        return Ok(left + right + err / 15.0);
    }
    if depth == 0 {
        return Err(Error::Quadrature { a, b });
    }
    Ok(simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScalars {
    pub kappa1: f64,
    pub epsilon: f64,
    pub kappa: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Tabulated profile and scalars. For `R = 0` the grid is empty and the
/// semimetric is `sqrt(G)` (see [`MetricTable::is_degenerate`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub params: MetricParams,
    pub quad_tol: f64,
    pub n_smooth: Option<u64>,
    /// Upper end of the tabulated range, `r₀ + 1/n` or `r₀`.
    pub r_end: f64,
    pub grid: Vec<f64>,
    pub big_phi: Vec<f64>,
    pub g: Vec<f64>,
    pub f: Vec<f64>,
    /// `f' = φ g` after the monotone limiter.
    pub slopes: Vec<f64>,
    pub scalars: MetricScalars,
}

pub fn phi(theta: f64, u: f64) -> f64 {
    (-theta * u * u / 8.0).exp()
}

/// Builds the limit table (`n = ∞`) with the default grid.
pub fn build_metric(params: &MetricParams, quad_tol: f64) -> Result<MetricTable> {
    build_metric_with(params, quad_tol, None, DEFAULT_GRID)
}

/// Builds the table for smoothing index `n_smooth` (`None` = limit) on
/// `n_grid` uniform intervals.
pub fn build_metric_with(
    params: &MetricParams,
    quad_tol: f64,
    n_smooth: Option<u64>,
    n_grid: usize,
) -> Result<MetricTable> {
    if !(quad_tol > 0.0) {
        return Err(Error::param("quad_tol", "must be positive"));
    }
    if n_grid < 2 {
        return Err(Error::param("n_grid", "must be at least 2"));
    }
    if n_smooth == Some(0) {
        return Err(Error::param("n_smooth", "must be positive"));
    }
    let theta = params.theta;
    let r = params.r;
    if r == 0.0 {
        // G contracts pathwise under synchronous coupling: sqrt(G) at rate κ₂/2
        let lambda = params.lambda;
        return Ok(MetricTable {
            params: params.clone(),
            quad_tol,
            n_smooth,
            r_end: 0.0,
            grid: vec![],
            big_phi: vec![],
            g: vec![],
            f: vec![],
            slopes: vec![],
            scalars: MetricScalars {
                kappa1: 0.5 * params.kappa2,
                epsilon: 1.0,
                kappa: 0.5 * params.kappa2,
                c1: 1.0 / lambda.sqrt(),
                c2: theta + SQRT_2,
            },
        });
    }
    if !(r > 0.0) {
        return Err(Error::param("R", "must be positive"));
    }
    let r_end = params.r0 + n_smooth.map_or(0.0, |n| 1.0 / n as f64);
    let h = r_end / n_grid as f64;
    let grid: Vec<f64> = (0..=n_grid).map(|i| i as f64 * h).collect();
    let ph = |u: f64| phi(theta, u);
    let cell_tol = quad_tol / n_grid as f64;

    // cumulative Φ, ∫Φ/φ, ∫u²/φ, ∫1/φ on the grid
    let mut big_phi = vec![0.0; n_grid + 1];
    let mut i1 = vec![0.0; n_grid + 1];
    let mut ja = vec![0.0; n_grid + 1];
    let mut jb = vec![0.0; n_grid + 1];
    for i in 0..n_grid {
        let (a, b) = (grid[i], grid[i + 1]);
        let phi_a = big_phi[i];
        let big_phi_at = |u: f64| -> f64 { phi_a + adaptive_simpson(&ph, a, u, cell_tol).unwrap_or(f64::NAN) };
        big_phi[i + 1] = phi_a + adaptive_simpson(&ph, a, b, cell_tol)?;
        i1[i + 1] = i1[i] + adaptive_simpson(&|u| big_phi_at(u) / ph(u), a, b, cell_tol)?;
        ja[i + 1] = ja[i] + adaptive_simpson(&|u| u * u / ph(u), a, b, cell_tol)?;
        jb[i + 1] = jb[i] + adaptive_simpson(&|u| 1.0 / ph(u), a, b, cell_tol)?;
    }
    let kappa1 = 0.5 / i1[n_grid];
    let w = (1.0 + 0.5 * kappa1) * theta;
    let i2_end = w * ja[n_grid] + 4.0 * jb[n_grid];
    let epsilon = (0.5 / i2_end).min(4.0 / (9.0 * r));
    let g: Vec<f64> =
        (0..=n_grid).map(|i| 1.0 - 0.5 * kappa1 * i1[i] - 0.5 * epsilon * (w * ja[i] + 4.0 * jb[i])).collect();

    let mut f = vec![0.0; n_grid + 1];
    for i in 0..n_grid {
        let (a, b) = (grid[i], grid[i + 1]);
        let (phi_a, g_a) = (big_phi[i], g[i]);
        let big_phi_at = move |u: f64| phi_a + adaptive_simpson(&ph, a, u, cell_tol).unwrap_or(f64::NAN);
        let g_at = |u: f64| -> f64 {
            let di1 = adaptive_simpson(&|s| big_phi_at(s) / ph(s), a, u, cell_tol).unwrap_or(f64::NAN);
            let di2 = adaptive_simpson(&|s| (w * s * s + 4.0) / ph(s), a, u, cell_tol).unwrap_or(f64::NAN);
            g_a - 0.5 * kappa1 * di1 - 0.5 * epsilon * di2
        };
        f[i + 1] = f[i] + adaptive_simpson(&|u| ph(u) * g_at(u), a, b, cell_tol)?;
    }
    if f.iter().chain(&g).any(|v| !v.is_finite()) {
        return Err(Error::Quadrature { a: 0.0, b: r_end });
    }
    let mut slopes: Vec<f64> = (0..=n_grid).map(|i| ph(grid[i]) * g[i]).collect();
    fritsch_carlson(&f, h, &mut slopes);

    let phi_end = big_phi[n_grid];
    let lam = params.lambda;
    let kappa = kappa1
        .min(lam * r * r * epsilon * params.kappa2 / (lam * r * r * epsilon + 2.0 * phi_end))
        .min(1.0 / (4.0 + 6.0 * epsilon * r));
    let c1 = SQRT_2 * (2.0 * r_end / phi_end).max(1.0 / (lam * epsilon * r));
    Ok(MetricTable {
        params: params.clone(),
        quad_tol,
        n_smooth,
        r_end,
        grid,
        big_phi,
        g,
        f,
        slopes,
        scalars: MetricScalars { kappa1, epsilon, kappa, c1, c2: theta + SQRT_2 },
    })
}

fn fritsch_carlson(y: &[f64], h: f64, m: &mut [f64]) {
    for i in 0..y.len() - 1 {
        let delta = (y[i + 1] - y[i]) / h;
        if delta <= 0.0 {
            m[i] = 0.0;
            m[i + 1] = 0.0;
            continue;
        }
        let (a, b) = (m[i] / delta, m[i + 1] / delta);
        let s = a * a + b * b;
        if s > 9.0 {
            let tau = 3.0 / s.sqrt();
            m[i] = tau * a * delta;
            m[i + 1] = tau * b * delta;
        }
    }
}

impl MetricTable {
    /// True for `R = 0`, where `ρ = sqrt(G)`.
    pub fn is_degenerate(&self) -> bool {
        self.grid.is_empty()
    }

    fn step(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    /// `f(r)` by cubic Hermite interpolation; constant beyond `r_end`.
    pub fn f_at(&self, r: f64) -> f64 {
        if self.is_degenerate() || r <= 0.0 {
            return 0.0;
        }
        let n = self.grid.len() - 1;
        if r >= self.r_end {
            return self.f[n];
        }
        let h = self.step();
        let i = ((r / h) as usize).min(n - 1);
        let t = (r - self.grid[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.f[i] + h10 * h * self.slopes[i] + h01 * self.f[i + 1] + h11 * h * self.slopes[i + 1]
    }

    /// `Φ(r)` by linear-corrected Hermite interpolation with slopes `φ`.
    pub fn big_phi_at(&self, r: f64) -> f64 {
        if self.is_degenerate() || r <= 0.0 {
            return 0.0;
        }
        let theta = self.params.theta;
        let n = self.grid.len() - 1;
        if r >= self.r_end {
            return self.big_phi[n]
                + adaptive_simpson(&|u| phi(theta, u), self.r_end, r, self.quad_tol).unwrap_or(f64::NAN);
        }
        let h = self.step();
        let i = ((r / h) as usize).min(n - 1);
        self.big_phi[i]
            + adaptive_simpson(&|u| phi(theta, u), self.grid[i], r, self.quad_tol / n as f64).unwrap_or(f64::NAN)
    }

    /// Largest value over the grid of the differential-inequality residual
    /// `4f'' + θ r f' + κ₁ f + ε[(1 + κ₁/2)θr² + 4]`, with `f''` from
    /// second differences and `f'` from the tabulated slope.
    pub fn residual_max(&self) -> f64 {
        if self.is_degenerate() {
            return f64::NEG_INFINITY;
        }
        let h = self.step();
        let s = &self.scalars;
        let theta = self.params.theta;
        let n = self.grid.len() - 1;
        (1..n)
            .map(|i| {
                let r = self.grid[i];
                let f2 = (self.f[i + 1] - 2.0 * self.f[i] + self.f[i - 1]) / (h * h);
                let f1 = phi(theta, r) * self.g[i];
                4.0 * f2
                    + theta * f1 * r
                    + s.kappa1 * self.f[i]
                    + s.epsilon * ((1.0 + 0.5 * s.kappa1) * theta * r * r + 4.0)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest second difference of the tabulated `f`.
    pub fn max_second_difference(&self) -> f64 {
        self.f.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `r(z, z') = θ|δx| + |δx + δv|` for `z = (x, v)` stacked.
    pub fn r_distance(&self, z: &[f64], zp: &[f64]) -> f64 {
        let d = z.len() / 2;
        let mut sx = 0.0;
        let mut sq = 0.0;
        for i in 0..d {
            let dx = z[i] - zp[i];
            let dq = dx + z[d + i] - zp[d + i];
            sx += dx * dx;
            sq += dq * dq;
        }
        self.params.theta * sx.sqrt() + sq.sqrt()
    }

    /// The semimetric `ρ(z, z')`.
    pub fn rho(&self, z: &[f64], zp: &[f64]) -> Result<f64> {
        let d = self.params.dim;
        if z.len() != 2 * d || zp.len() != 2 * d {
            return Err(Error::DimensionMismatch { expected: 2 * d, got: z.len().max(zp.len()) });
        }
        let dx: Vec<f64> = (0..d).map(|i| z[i] - zp[i]).collect();
        let dv: Vec<f64> = (0..d).map(|i| z[d + i] - zp[d + i]).collect();
        let g = g_form(&self.params.stiffness, self.params.eta, &dx, &dv);
        if self.is_degenerate() {
            return Ok(g.max(0.0).sqrt());
        }
        Ok(self.scalars.epsilon * g + self.f_at(self.r_distance(z, zp)))
    }
}

/// `ρ_*(z, z') = ε G(z, z') + f(θ|δx| + |δq|)`.
pub fn rho_star(table: &MetricTable, params: &MetricParams, z: &[f64], zp: &[f64]) -> Result<f64> {
    if params != &table.params {
        return Err(Error::param("params", "do not match the table"));
    }
    table.rho(z, zp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::function::erf::erf;

    fn identity_table() -> MetricTable {
        let p = metric_constants(&DMatrix::identity(1, 1), 0.0, 0.0, 1.0).unwrap();
        build_metric(&p, DEFAULT_QUAD_TOL).unwrap()
    }

    #[test]
    fn constants_identity() {
        let p = metric_constants(&DMatrix::identity(2, 2), 0.0, 0.0, 1.0).unwrap();
        assert_eq!((p.theta, p.eta, p.lambda, p.r0, p.kappa2), (2.0, 0.5, 0.25, 3.0, 0.125));
    }

    #[test]
    fn constants_anisotropic() {
        let k = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 1.0]));
        let p = metric_constants(&k, 1.0, 0.0, 0.0).unwrap();
        assert_eq!((p.theta, p.eta, p.lambda, p.r0), (10.0, 0.5, 0.25, 0.0));
        assert!((p.kappa2 - 1.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn admissibility_boundary_rejected() {
        let k = DMatrix::identity(1, 1);
        assert!(matches!(metric_constants(&k, 1.0, 1.0 / 19.0, 1.0), Err(Error::Inadmissible(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(metric_constants(&asym, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn simpson_integrates_gaussian() {
        let v = adaptive_simpson(&|u| (-u * u).exp(), 0.0, 2.0, 1e-12).unwrap();
        let exact = std::f64::consts::PI.sqrt() / 2.0 * erf(2.0);
        assert!((v - exact).abs() < 1e-11);
    }

    #[test]
    fn identity_table_properties() {
        let t = identity_table();
        let exact = std::f64::consts::PI.sqrt() * erf(1.5);
        assert!((t.big_phi.last().unwrap() - exact).abs() < 1e-8);
        assert_eq!(t.f[0], 0.0);
        assert!((t.slopes[0] - 1.0).abs() < 1e-15);
        for i in 0..t.grid.len() {
            assert!(t.g[i] >= 0.5 && t.g[i] <= 1.0);
            assert!(t.f[i] >= t.grid[i] / 2.0 - 1e-12 && t.f[i] <= t.big_phi[i] + 1e-12);
        }
        assert!(t.max_second_difference() <= t.quad_tol);
        assert!(t.residual_max() <= 10.0 * t.quad_tol);
        let s = t.scalars;
        let last = (t.params.lambda * s.epsilon * t.params.kappa2)
            / (t.params.lambda * s.epsilon + 2.0 * t.big_phi.last().unwrap());
        assert!(s.kappa >= s.kappa1.min(last).min(0.15) - 1e-15);
        assert!((s.c2 - (2.0 + SQRT_2)).abs() < 1e-15);
    }

    #[test]
    fn finite_smoothing_extends_range() {
        let p = metric_constants(&DMatrix::identity(1, 1), 0.0, 0.0, 1.0).unwrap();
        let t = build_metric_with(&p, 1e-10, Some(10), 1024).unwrap();
        assert!((t.r_end - 3.1).abs() < 1e-15);
        let lim = identity_table();
        assert!(t.scalars.kappa1 < lim.scalars.kappa1);
    }

    #[test]
    fn refinement_is_stable() {
        let p = metric_constants(&DMatrix::identity(1, 1), 0.0, 0.0, 1.0).unwrap();
        let a = build_metric_with(&p, 1e-8, None, 1024).unwrap();
        let b = build_metric_with(&p, 5e-9, None, 1024).unwrap();
        for (x, y) in [(a.scalars.kappa, b.scalars.kappa), (a.scalars.c1, b.scalars.c1)] {
            assert!(((x - y) / x).abs() < 10.0 * 1e-8);
        }
    }

    #[test]
    fn quadratic_form_examples() {
        let t = identity_table();
        let k = DMatrix::identity(1, 1);
        assert_eq!(g_quadratic(&t.params, &k, &[0.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(g_quadratic(&t.params, &k, &[1.0], &[1.0]).unwrap(), 1.5);
        assert!(g_quadratic(&t.params, &k, &[1.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn degenerate_radius() {
        let p = metric_constants(&DMatrix::identity(1, 1), 0.0, 0.0, 0.0).unwrap();
        let t = build_metric(&p, 1e-10).unwrap();
        assert!(t.is_degenerate());
        let z = [1.0, 0.0];
        let rho = t.rho(&z, &[0.0, 0.0]).unwrap();
        assert!((rho - 0.5_f64.sqrt()).abs() < 1e-15);
        assert!(1.0 <= t.scalars.c1 * rho);
    }

    #[test]
    fn json_round_trip() {
        let t = identity_table();
        let s = serde_json::to_string(&t).unwrap();
        let back: MetricTable = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn quadratic_sandwich(dx in prop::collection::vec(-5.0..5.0f64, 2), dv in prop::collection::vec(-5.0..5.0f64, 2), a in 0.2..3.0f64) {
            let k = DMatrix::from_row_slice(2, 2, &[a, 0.1, 0.1, 1.0]);
            let p = metric_constants(&k, 0.0, 0.0, 1.0).unwrap();
            let g = g_quadratic(&p, &k, &dx, &dv).unwrap();
            let n2: f64 = dx.iter().chain(&dv).map(|c| c * c).sum();
            prop_assert!(p.lambda * n2 <= g + 1e-12);
            prop_assert!(g <= 0.5 * p.theta * n2 + 1e-12);
        }

        #[test]
        fn interpolant_monotone(a in 0.0..3.5f64, b in 0.0..3.5f64) {
            let t = identity_table();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(t.f_at(lo) <= t.f_at(hi) + 1e-15);
        }
    }
}
