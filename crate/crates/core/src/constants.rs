//! Closed-form constants for the high-diffusivity regime and the
//! perturbation bounds.
//!
//! Convention: `dX = b(X) dt + σ dB`. All σ-dependent formulas are used as
//! stated for this form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::MetricTable;
use crate::models::EllipticModel;
use crate::rng::{Channel, NoiseStream};

/// Below this `L` the slope `A` switches to its series in `L`.
pub const SMALL_L: f64 = 1e-12;

fn check_pos(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be positive and finite, got {v}")))
    }
}

fn check_nonneg(name: &'static str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be nonnegative and finite, got {v}")))
    }
}

/// Wang-type Harnack factor `exp(α/(2σ²(α-1)) · (K²t + dist²/t))`.
pub fn harnack_factor(k_w: f64, sigma: f64, alpha: f64, t: f64, dist: f64) -> Result<f64> {
    check_nonneg("K_w", k_w)?;
    check_pos("sigma", sigma)?;
    check_pos("t", t)?;
    check_nonneg("dist", dist)?;
    if !(alpha > 1.0) {
        return Err(Error::param("alpha", "must exceed 1"));
    }
    Ok((alpha / (2.0 * sigma * sigma * (alpha - 1.0)) * (k_w * k_w * t + dist * dist / t)).exp())
}

/// Exponents for the `α → β` hypercontractivity bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperQuery {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_h: f64,
    pub t: f64,
}

impl HyperQuery {
    pub fn new(alpha: f64, beta: f64, gamma_h: f64, t: f64) -> Result<Self> {
        if !(alpha > 1.0 && beta > alpha) {
            return Err(Error::param("alpha/beta", "require beta > alpha > 1"));
        }
        if !(gamma_h > 1.0) {
            return Err(Error::param("gamma_h", "must exceed 1"));
        }
        check_pos("t", t)?;
        Ok(HyperQuery { alpha, beta, gamma_h, t })
    }
}

/// `t₀ = 2β / (σ²ρ(α-1))`.
pub fn hyper_t0(rho: f64, sigma: f64, alpha: f64, beta: f64) -> f64 {
    2.0 * beta / (sigma * sigma * rho * (alpha - 1.0))
}

/// Returns `(t₀, bound)` on `‖P_t‖_{α→β}`, defined for `t > t₀`.
#[allow(clippy::too_many_arguments)]
pub fn hypercontractivity_bound(
    l: f64,
    rho: f64,
    r: f64,
    sigma: f64,
    d: usize,
    alpha: f64,
    beta: f64,
    t: f64,
) -> Result<(f64, f64)> {
    check_nonneg("L", l)?;
    check_pos("rho", rho)?;
    check_nonneg("R", r)?;
    check_pos("sigma", sigma)?;
    if !(alpha > 1.0 && beta > alpha) {
        return Err(Error::param("alpha/beta", "require beta > alpha > 1"));
    }
    let t0 = hyper_t0(rho, sigma, alpha, beta);
    if !(t > t0) {
        return Err(Error::param("t", format!("bound requires t > t0 = {t0}, got {t}")));
    }
    let dd = d as f64;
    let pre = 1.0 + 4.0 * dd + 2.0 * (l + rho) * r * r;
    let expo = beta * l * r * t / (2.0 * sigma * sigma * (alpha - 1.0))
        + 0.125 * ((1.0 + 4.0 * dd) / (t / t0 - 1.0)).max(2.0 * rho * r * r);
    Ok((t0, pre * expo.exp()))
}

/// Bound on `‖P_t‖_{1→α}` from `‖P_t‖_{α→(γα-1)/(γ-1)} = norm_val`.
pub fn interpolate_norm(alpha: f64, gamma_h: f64, norm_val: f64) -> Result<f64> {
    if !(alpha > 1.0) || !(gamma_h > 1.0) {
        return Err(Error::param("alpha/gamma_h", "must exceed 1"));
    }
    if !(norm_val >= 1.0) {
        return Err(Error::param("norm_val", "operator norms of Markov semigroups are >= 1"));
    }
    Ok(norm_val.powf(gamma_h * alpha - 1.0))
}

/// Target exponent `(γα - 1)/(γ - 1)` paired with [`interpolate_norm`].
pub fn interpolation_target(alpha: f64, gamma_h: f64) -> f64 {
    (gamma_h * alpha - 1.0) / (gamma_h - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovQuery {
    pub delta: f64,
}

impl LyapunovQuery {
    pub fn new(delta: f64, rho: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < rho / 4.0) {
            return Err(Error::param("delta", format!("must lie in (0, rho/4) = (0, {})", rho / 4.0)));
        }
        Ok(LyapunovQuery { delta })
    }
}

/// Bound on `∬ exp(δ|x-y|²) μ(dx)μ(dy)`.
pub fn lyapunov_bound(l: f64, rho: f64, r: f64, d: usize, q: LyapunovQuery) -> Result<f64> {
    check_nonneg("L", l)?;
    check_pos("rho", rho)?;
    check_nonneg("R", r)?;
    let q = LyapunovQuery::new(q.delta, rho)?;
    let (delta, dd) = (q.delta, d as f64);
    let pre = 1.0 + 4.0 * dd + (2.0 * l + 8.0 * delta) * r * r;
    Ok(pre * (delta * ((1.0 + 4.0 * dd) / (2.0 * (rho - 4.0 * delta))).max(r * r)).exp())
}

/// Defective-LSI slope and offset `(A, B)`.
pub fn defective_lsi_constants(l: f64, rho: f64, r: f64, sigma: f64, d: usize) -> Result<(f64, f64)> {
    check_nonneg("L", l)?;
    check_pos("rho", rho)?;
    check_nonneg("R", r)?;
    check_pos("sigma", sigma)?;
    let s2 = sigma * sigma;
    let x = 24.0 * l / (s2 * rho);
    let a = if l < SMALL_L {
        // σ²/(2L)·(eˣ - 1) = (12/ρ)(1 + x/2 + x²/6 + …)
        12.0 / rho * (1.0 + x / 2.0 + x * x / 6.0)
    } else {
        s2 / (2.0 * l) * x.exp_m1()
    };
    let dd = d as f64;
    let b = 6.0 * (1.0 + 4.0 * dd + 2.0 * (l + rho) * r * r).ln()
        + 108.0 * l * r / (s2 * s2 * rho)
        + 0.75 * (1.0 + 4.0 * dd).max(2.0 * rho * r * r);
    Ok((a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoincareConstants {
    pub r_star: f64,
    pub sigma0: f64,
    pub c: f64,
    /// `σ < σ₀`: the Poincaré constant is outside its proven range.
    pub below_threshold: bool,
}

/// `R_*`, `σ₀` and the Poincaré constant `C`; `sup_inner` is
/// `sup{-x·b(x) : |x| ≤ R_*}` (see [`sup_inner_drift`]).
#[allow(clippy::too_many_arguments)]
pub fn poincare_constant(
    l: f64,
    rho: f64,
    r: f64,
    sigma: f64,
    d: usize,
    alpha_ext: f64,
    sup_inner: f64,
) -> Result<PoincareConstants> {
    check_nonneg("L", l)?;
    check_pos("rho", rho)?;
    check_nonneg("R", r)?;
    check_pos("sigma", sigma)?;
    check_nonneg("alpha_ext", alpha_ext)?;
    if d == 0 {
        return Err(Error::param("d", "must be positive"));
    }
    let dd = d as f64;
    let r_star = r * (2.0 + 2.0 * l / rho).powf(1.0 / dd);
    let rs2 = r_star * r_star;
    let sigma0 = (2.0 * l + rho) * ((2.0 * l + rho / 2.0) * rs2 + 2.0 * sup_inner) / (rho * dd);
    let c = 4.0 * sigma / rho * (1.0 + alpha_ext * (2.0 * l + rho) * rs2 / (4.0 * dd * sigma));
    Ok(PoincareConstants { r_star, sigma0, c, below_threshold: sigma < sigma0 })
}

/// `C_LS = A + C(B + 2)/4`.
pub fn lsi_constant(a: f64, b: f64, c: f64) -> f64 {
    a + c * (b + 2.0) / 4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupReport {
    pub value: f64,
    pub argmax: Vec<f64>,
    pub evaluations: usize,
}

/// Maximises `-x·b(x)` over `|x| ≤ R_*`. Uses a tensor grid with
/// `resolution` points per axis for `d ≤ 3` and `resolution³` uniform ball
/// samples otherwise; `resolution` directions on the sphere `|x| = R_*` are
/// always added. The origin contributes `0`.
pub fn sup_inner_drift(model: &EllipticModel, r_star: f64, resolution: usize) -> Result<SupReport> {
    check_nonneg("R_*", r_star)?;
    let d = model.dim;
    let mut best = SupReport { value: 0.0, argmax: vec![0.0; d], evaluations: 1 };
    if r_star == 0.0 {
        return Ok(best);
    }
    let mut out = vec![0.0; d];
    let mut visit = |x: &[f64], best: &mut SupReport| {
        (model.drift)(x, &mut out);
        let v = -x.iter().zip(&out).map(|(a, b)| a * b).sum::<f64>();
        best.evaluations += 1;
        if v > best.value {
            best.value = v;
            best.argmax = x.to_vec();
        }
    };
    let res = resolution.max(3) | 1;
    let mut noise = NoiseStream::new(0x5eed, 0, Channel::Sampling);
    if d <= 3 {
        let h = 2.0 * r_star / (res - 1) as f64;
        let total = res.pow(d as u32);
        let mut x = vec![0.0; d];
        for idx in 0..total {
            let mut k = idx;
            for c in x.iter_mut() {
                *c = -r_star + (k % res) as f64 * h;
                k /= res;
            }
            if x.iter().map(|c| c * c).sum::<f64>() <= r_star * r_star * (1.0 + 1e-12) {
                visit(&x, &mut best);
            }
        }
    } else {
        let mut x = vec![0.0; d];
        for _ in 0..res.pow(3) {
            noise.fill_normal(&mut x);
            let n = x.iter().map(|c| c * c).sum::<f64>().sqrt();
            let rad = r_star * noise.uniform().powf(1.0 / d as f64);
            x.iter_mut().for_each(|c| *c *= rad / n);
            visit(&x, &mut best);
        }
    }
    let mut x = vec![0.0; d];
    for k in 0..res * d {
        if d == 2 {
            let a = std::f64::consts::TAU * k as f64 / (res * d) as f64;
            x[0] = r_star * a.cos();
            x[1] = r_star * a.sin();
        } else if d == 1 {
            x[0] = if k % 2 == 0 { r_star } else { -r_star };
        } else {
            noise.fill_normal(&mut x);
            let n = x.iter().map(|c| c * c).sum::<f64>().sqrt();
            x.iter_mut().for_each(|c| *c *= r_star / n);
        }
        visit(&x, &mut best);
    }
    Ok(best)
}

/// Inputs of the elliptic constants report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipticInputs {
    pub l: f64,
    pub rho: f64,
    pub r: f64,
    pub sigma: f64,
    pub d: usize,
    #[serde(default = "one")]
    pub alpha_ext: f64,
    /// `sup{-x·b(x) : |x| ≤ R_*}`; `None` is only valid when `R = 0`.
    #[serde(default)]
    pub sup_inner: Option<f64>,
}

fn one() -> f64 {
    1.0
}

/// All explicit elliptic constants, with inputs echoed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub inputs: EllipticInputs,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub sigma0: f64,
    pub r_star: f64,
    /// `t₀` of the default path `α = 2`, `β = 3`.
    pub t0: f64,
    /// `‖P_{2t₀}‖_{2→3}` bound of the default path.
    pub hyper_bound_2t0: f64,
    pub c_ls: f64,
    pub sigma_below_threshold: bool,
    pub warnings: Vec<String>,
}

impl ConstantsReport {
    pub fn compute(inputs: &EllipticInputs) -> Result<Self> {
        let EllipticInputs { l, rho, r, sigma, d, alpha_ext, sup_inner } = inputs.clone();
        let sup = match sup_inner {
            Some(s) => s,
            None if r == 0.0 => 0.0,
            None => return Err(Error::MissingComponent("sup_inner (required when R > 0)")),
        };
        let (a, b) = defective_lsi_constants(l, rho, r, sigma, d)?;
        let p = poincare_constant(l, rho, r, sigma, d, alpha_ext, sup)?;
        let t0 = hyper_t0(rho, sigma, 2.0, 3.0);
        let (_, hyper) = hypercontractivity_bound(l, rho, r, sigma, d, 2.0, 3.0, 2.0 * t0)?;
        let mut warnings = vec![format!(
            "alpha_ext = {alpha_ext} is an external constant of the Poincaré bound, not fixed by the model"
        )];
        if p.below_threshold {
            warnings.push(format!("sigma = {sigma} < sigma0 = {}: Poincaré constant not guaranteed", p.sigma0));
        }
        Ok(ConstantsReport {
            inputs: inputs.clone(),
            a,
            b,
            c: p.c,
            sigma0: p.sigma0,
            r_star: p.r_star,
            t0,
            hyper_bound_2t0: hyper,
            c_ls: lsi_constant(a, b, p.c),
            sigma_below_threshold: p.below_threshold,
            warnings,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBound {
    pub t: f64,
    /// `2 M^φ t`.
    pub bounded_part: f64,
    /// Coefficient `C'(2M^φ/t + L^φ)` of `dist`.
    pub lipschitz_part: f64,
    pub total: f64,
}

/// `|u_T(x) - u_T(y)| ≤ 2M^φ t + C'(2M^φ/t + L^φ) dist`, at `t_opt` when
/// given and at the minimiser `t* = sqrt(C' dist)` otherwise.
pub fn perturbation_bound_elliptic(
    m_phi: f64,
    l_phi: f64,
    c_prime: f64,
    dist: f64,
    t_opt: Option<f64>,
) -> Result<PerturbationBound> {
    check_nonneg("M_phi", m_phi)?;
    check_nonneg("L_phi", l_phi)?;
    check_pos("C'", c_prime)?;
    check_nonneg("dist", dist)?;
    if let Some(t) = t_opt {
        check_pos("t", t)?;
        let bounded = 2.0 * m_phi * t;
        let lip = c_prime * (2.0 * m_phi / t + l_phi);
        return Ok(PerturbationBound { t, bounded_part: bounded, lipschitz_part: lip, total: bounded + lip * dist });
    }
    let t = (c_prime * dist).sqrt();
    if t == 0.0 || m_phi == 0.0 {
        let lip = c_prime * l_phi;
        return Ok(PerturbationBound { t, bounded_part: 0.0, lipschitz_part: lip, total: lip * dist });
    }
    let bounded = 2.0 * m_phi * t;
    let lip = c_prime * (2.0 * m_phi / t + l_phi);
    Ok(PerturbationBound { t, bounded_part: bounded, lipschitz_part: lip, total: bounded + lip * dist })
}

/// Lipschitz constant `C₁C₂L^φ/κ` of the kinetic value function.
pub fn kinetic_value_lip_bound(table: &MetricTable, l_phi: f64) -> f64 {
    let s = &table.scalars;
    s.c1 * s.c2 * l_phi / s.kappa
}
