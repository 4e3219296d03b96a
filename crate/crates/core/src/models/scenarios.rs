//! Named scenarios, built from JSON parameter blocks.
//!
//! | name                | model                                                   |
//! |---------------------|---------------------------------------------------------|
//! | `ou`                | `b(x) = -a x - ∇V(x)`, optional compact bump `V`        |
//! | `rotating`          | `b(x) = f(|x|) x^⊥ - x - ∇V(x)` on `R²`                  |
//! | `double-well`       | `b(x) = x - |x|² x`                                     |
//! | `kinetic-quadratic` | `U = xᵀKx/2`, `G(x, v) = -c v / sqrt(1 + |v|²)`         |
//! | `competition`       | McKean–Vlasov competition system with confinement `V`  |

use std::f64::consts::SQRT_2;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    CompetitionKernel, DriftSplit, EllipticModel, KineticLipschitz, KineticModel, PhaseField, PhaseScalar, ScalarField,
    Structural, VecField,
};
use crate::error::{Error, Result};

/// Compactly supported bump `V(x) = A (1 - |x|²/w²)³` for `|x| < w`.
/// Returns `(V, ∇V, ΔV)`.
pub fn bump(x: &[f64], amp: f64, width: f64) -> (f64, Vec<f64>, f64) {
    let d = x.len() as f64;
    let w2 = width * width;
    let s = x.iter().map(|c| c * c).sum::<f64>() / w2;
    if s >= 1.0 || amp == 0.0 {
        return (0.0, vec![0.0; x.len()], 0.0);
    }
    let one = 1.0 - s;
    let v = amp * one * one * one;
    let grad = x.iter().map(|c| -6.0 * amp * one * one * c / w2).collect();
    let lap = -6.0 * amp / w2 * one * (one * d - 4.0 * s);
    (v, grad, lap)
}

fn sup_and_lip_radial(f: impl Fn(f64) -> f64, r_max: f64) -> (f64, f64) {
    let n = 20_000;
    let h = r_max / n as f64;
    let mut sup = 0.0_f64;
    let mut lip = 0.0_f64;
    let mut prev = f(0.0);
    for i in 1..=n {
        let cur = f(i as f64 * h);
        sup = sup.max(cur.abs());
        lip = lip.max((cur - prev).abs() / h);
        prev = cur;
    }
    (sup.max(f(0.0).abs()), lip)
}

fn default_sigma() -> f64 {
    SQRT_2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BumpParams {
    pub amplitude: f64,
    pub width: f64,
}

impl Default for BumpParams {
    fn default() -> Self {
        BumpParams { amplitude: 0.0, width: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuParams {
    pub dim: usize,
    pub rate: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub rho: Option<f64>,
    pub l: f64,
    pub r: f64,
    pub bump: Option<BumpParams>,
}

impl Default for OuParams {
    fn default() -> Self {
        OuParams { dim: 1, rate: 1.0, sigma: SQRT_2, rho: None, l: 0.0, r: 0.0, bump: None }
    }
}

impl OuParams {
    pub fn build(&self) -> Result<EllipticModel> {
        let a = self.rate;
        let d = self.dim;
        if !(a > 0.0) {
            return Err(Error::param("rate", "must be positive"));
        }
        let structural = Structural::new(self.rho.unwrap_or(a), self.l, self.r)?;
        let bp = self.bump.clone().unwrap_or_default();
        let (amp, w) = (bp.amplitude, bp.width);
        if !(w > 0.0) {
            return Err(Error::param("bump.width", "must be positive"));
        }
        let drift: VecField = Arc::new(move |x: &[f64], o: &mut [f64]| {
            let (_, g, _) = bump(x, amp, w);
            for i in 0..x.len() {
                o[i] = -a * x[i] - g[i];
            }
        });
        let base: VecField = Arc::new(move |x: &[f64], o: &mut [f64]| {
            for i in 0..x.len() {
                o[i] = -a * x[i];
            }
        });
        let pert: VecField = Arc::new(move |x: &[f64], o: &mut [f64]| {
            let (_, g, _) = bump(x, amp, w);
            for i in 0..x.len() {
                o[i] = -g[i];
            }
        });
        let div: ScalarField = Arc::new(move |x: &[f64]| -bump(x, amp, w).2);
        let c = 2.0 * a / (self.sigma * self.sigma);
        let grad_log: VecField = Arc::new(move |x: &[f64], o: &mut [f64]| {
            for i in 0..x.len() {
                o[i] = -c * x[i];
            }
        });
        // φ(x) = ΔV - c ∇V·x, radial
        let dd = d;
        let (m_phi, l_phi) = sup_and_lip_radial(
            |r| {
                let mut x = vec![0.0; dd];
                x[0] = r;
                let (_, g, lap) = bump(&x, amp, w);
                lap - c * g[0] * r
            },
            w,
        );
        let phi: ScalarField = Arc::new(move |x: &[f64]| {
            let (_, g, lap) = bump(x, amp, w);
            lap - c * super::dot(&g, x)
        });
        let zero: ScalarField = Arc::new(|_x: &[f64]| 0.0);
        Ok(EllipticModel::new("ou", d, self.sigma, structural, drift)?
            .with_split(DriftSplit { base, perturbation: pert, perturbation_div: Some(div) })
            .with_grad_log_ref(grad_log)
            .with_potential_split(phi, zero)
            .with_perturbation_bounds(m_phi, l_phi)
            .with_reference_lsi(1.0 / a * self.sigma * self.sigma / 2.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotatingParams {
    pub f0: f64,
    /// When set, `f(r) = f0 (1 - r²/w²)³₊`; otherwise `f ≡ f0`.
    pub f_width: Option<f64>,
    pub v_amp: f64,
    pub v_width: f64,
    /// Use `b₀ = -∇V - x`, `b₁ = f x^⊥` instead of `b₀ = f x^⊥ - x`, `b₁ = -∇V`.
    pub alternative_split: bool,
    pub rho: f64,
    pub l: f64,
    pub r: f64,
}

impl Default for RotatingParams {
    fn default() -> Self {
        RotatingParams {
            f0: 1.0,
            f_width: None,
            v_amp: 0.0,
            v_width: 1.0,
            alternative_split: false,
            rho: 1.0,
            l: 0.0,
            r: 0.0,
        }
    }
}

impl RotatingParams {
    fn profile(&self) -> impl Fn(f64) -> f64 + Send + Sync + Copy + 'static {
        let (f0, fw) = (self.f0, self.f_width);
        move |r: f64| match fw {
            None => f0,
            Some(w) => {
                let s = r * r / (w * w);
                if s >= 1.0 {
                    0.0
                } else {
                    f0 * (1.0 - s).powi(3)
                }
            }
        }
    }

    pub fn build(&self) -> Result<EllipticModel> {
        if !(self.v_width > 0.0) {
            return Err(Error::param("v_width", "must be positive"));
        }
        let f = self.profile();
        let (amp, w) = (self.v_amp, self.v_width);
        let structural = Structural::new(self.rho, self.l, self.r)?;
        let drift: VecField = Arc::new(move |x: &[f64], o: &mut [f64]| {
            let fr = f((x[0] * x[0] + x[1] * x[1]).sqrt());
            let (_, g, _) = bump(x, amp, w);
            o[0] = fr * x[1] - x[0] - g[0];
            o[1] = -fr * x[0] - x[1] - g[1];
        });
        let rot: VecField = Arc::new(move |x: &[f64], o: &mut [f64]| {
            let fr = f((x[0] * x[0] + x[1] * x[1]).sqrt());
            o[0] = fr * x[1];
            o[1] = -fr * x[0];
        });
        let (split, grad_log, phi, m_phi, l_phi): (DriftSplit, VecField, ScalarField, f64, f64) =
            if !self.alternative_split {
                let r2 = rot.clone();
                let base: VecField = Arc::new(move |x: &[f64], o: &mut [f64]| {
                    r2(x, o);
                    o[0] -= x[0];
                    o[1] -= x[1];
                });
                let pert: VecField = Arc::new(move |x: &[f64], o: &mut [f64]| {
                    let (_, g, _) = bump(x, amp, w);
                    o[0] = -g[0];
                    o[1] = -g[1];
                });
                let div: ScalarField = Arc::new(move |x: &[f64]| -bump(x, amp, w).2);
                let gl: VecField = Arc::new(|x: &[f64], o: &mut [f64]| {
                    o[0] = -x[0];
                    o[1] = -x[1];
                });
                let phi: ScalarField = Arc::new(move |x: &[f64]| {
                    let (_, g, lap) = bump(x, amp, w);
                    lap - super::dot(&g, x)
                });
                let (m, l) = sup_and_lip_radial(
                    |r| {
                        let (_, g, lap) = bump(&[r, 0.0], amp, w);
                        lap - g[0] * r
                    },
                    w,
                );
                (DriftSplit { base, perturbation: pert, perturbation_div: Some(div) }, gl, phi, m, l)
            } else {
                let base: VecField = Arc::new(move |x: &[f64], o: &mut [f64]| {
                    let (_, g, _) = bump(x, amp, w);
                    o[0] = -g[0] - x[0];
                    o[1] = -g[1] - x[1];
                });
                let div: ScalarField = Arc::new(|_x: &[f64]| 0.0);
                let gl: VecField = Arc::new(move |x: &[f64], o: &mut [f64]| {
                    let (_, g, _) = bump(x, amp, w);
                    o[0] = -x[0] - g[0];
                    o[1] = -x[1] - g[1];
                });
                let phi: ScalarField = Arc::new(move |x: &[f64]| {
                    let fr = f((x[0] * x[0] + x[1] * x[1]).sqrt());
                    let (_, g, _) = bump(x, amp, w);
                    fr * (x[1] * g[0] - x[0] * g[1])
                });
                // x^⊥ ⊥ ∇V for a radial V, so φ vanishes identically
                (DriftSplit { base, perturbation: rot.clone(), perturbation_div: Some(div) }, gl, phi, 0.0, 0.0)
            };
        let zero: ScalarField = Arc::new(|_x: &[f64]| 0.0);
        Ok(EllipticModel::new("rotating", 2, SQRT_2, structural, drift)?
            .with_split(split)
            .with_grad_log_ref(grad_log)
            .with_potential_split(phi, zero)
            .with_perturbation_bounds(m_phi, l_phi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoubleWellParams {
    pub dim: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub rho: f64,
    pub l: f64,
    pub r: f64,
}

impl Default for DoubleWellParams {
    fn default() -> Self {
        // 1-d: ratio = 1 - (x² + xy + y²) ≤ 1 - |x - y|²/4
        DoubleWellParams { dim: 1, sigma: SQRT_2, rho: 3.0, l: 1.0, r: 4.0 }
    }
}

impl DoubleWellParams {
    pub fn build(&self) -> Result<EllipticModel> {
        let drift: VecField = Arc::new(|x: &[f64], o: &mut [f64]| {
            let n2: f64 = x.iter().map(|c| c * c).sum();
            for i in 0..x.len() {
                o[i] = x[i] - n2 * x[i];
            }
        });
        EllipticModel::new("double-well", self.dim, self.sigma, Structural::new(self.rho, self.l, self.r)?, drift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KineticQuadraticParams {
    pub dim: usize,
    pub gamma: f64,
    /// Row-major `K`; identity when absent.
    pub stiffness: Option<Vec<Vec<f64>>>,
    /// Amplitude `c` of the nonlinear friction `G(x, v) = -c v / sqrt(1 + |v|²)`.
    pub friction_amp: f64,
    /// Declared radius `R`.
    pub r: f64,
}

impl Default for KineticQuadraticParams {
    fn default() -> Self {
        KineticQuadraticParams { dim: 1, gamma: 1.0, stiffness: None, friction_amp: 0.0, r: 1.0 }
    }
}

impl KineticQuadraticParams {
    pub fn stiffness_matrix(&self) -> Result<DMatrix<f64>> {
        match &self.stiffness {
            None => Ok(DMatrix::identity(self.dim, self.dim)),
            Some(rows) => {
                if rows.len() != self.dim || rows.iter().any(|r| r.len() != self.dim) {
                    return Err(Error::param("stiffness", "must be dim × dim"));
                }
                Ok(DMatrix::from_fn(self.dim, self.dim, |i, j| rows[i][j]))
            }
        }
    }

    pub fn build(&self) -> Result<KineticModel> {
        let k = self.stiffness_matrix()?;
        let kk = k.clone();
        let grad_u: VecField = Arc::new(move |x: &[f64], o: &mut [f64]| {
            for i in 0..x.len() {
                o[i] = (0..x.len()).map(|j| kk[(i, j)] * x[j]).sum();
            }
        });
        let c = self.friction_amp;
        let forcing: PhaseField = Arc::new(move |_x: &[f64], v: &[f64], o: &mut [f64]| {
            let s = (1.0 + v.iter().map(|a| a * a).sum::<f64>()).sqrt();
            for i in 0..v.len() {
                o[i] = -c * v[i] / s;
            }
        });
        let residual: PhaseField = Arc::new(move |_x: &[f64], v: &[f64], o: &mut [f64]| {
            let s = (1.0 + v.iter().map(|a| a * a).sum::<f64>()).sqrt();
            for i in 0..v.len() {
                o[i] = c * v[i] / s;
            }
        });
        let div: PhaseScalar = Arc::new(move |_x: &[f64], v: &[f64]| {
            let n2: f64 = v.iter().map(|a| a * a).sum();
            let s = (1.0 + n2).sqrt();
            -c * (v.len() as f64 / s - n2 / (s * s * s))
        });
        let lip = KineticLipschitz { r: self.r, l1: c.abs(), l2: c.abs() };
        Ok(KineticModel::new("kinetic-quadratic", self.gamma, grad_u, forcing, k, residual, lip)?
            .with_forcing_div_v(div)
            .with_l_phi(c.abs() * (5.0 + 0.4 * self.dim as f64))
            .with_reference_lsi(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Zero,
    Bilinear,
    Arctan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompetitionParams {
    pub p: usize,
    pub kernel: KernelKind,
    pub kernel_scale: f64,
    /// `V(x) = a|x|²/2`.
    pub confinement: f64,
    pub lambda: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Declared constant of the decay condition on `b_μ`.
    pub c_prime: f64,
}

impl Default for CompetitionParams {
    fn default() -> Self {
        CompetitionParams {
            p: 1,
            kernel: KernelKind::Arctan,
            kernel_scale: 1.0,
            confinement: 1.0,
            lambda: 0.05,
            sigma: SQRT_2,
            c_prime: 4.0,
        }
    }
}

/// Interacting-particle system `dX = (-∇V(X) - λ b_μ(X)) dt + σ dB`.
#[derive(Debug, Clone)]
pub struct CompetitionSystem {
    pub kernel: CompetitionKernel,
    pub confinement: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub c_prime: f64,
}

impl CompetitionSystem {
    pub fn dim(&self) -> usize {
        2 * self.kernel.p
    }
}

impl CompetitionParams {
    pub fn build(&self) -> Result<CompetitionSystem> {
        if self.p == 0 {
            return Err(Error::param("p", "must be positive"));
        }
        if !(self.confinement > 0.0) || !(self.sigma > 0.0) {
            return Err(Error::param("confinement/sigma", "must be positive"));
        }
        let kernel = match self.kernel {
            KernelKind::Zero => CompetitionKernel::zero(self.p),
            KernelKind::Bilinear => CompetitionKernel::bilinear(self.p),
            KernelKind::Arctan => CompetitionKernel::arctan(self.p, self.kernel_scale),
        };
        Ok(CompetitionSystem {
            kernel,
            confinement: self.confinement,
            lambda: self.lambda,
            sigma: self.sigma,
            c_prime: self.c_prime,
        })
    }
}

/// Scenario registry keyed by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "kebab-case")]
pub enum Scenario {
    Ou(#[serde(default)] OuParams),
    Rotating(#[serde(default)] RotatingParams),
    DoubleWell(#[serde(default)] DoubleWellParams),
    KineticQuadratic(#[serde(default)] KineticQuadraticParams),
    Competition(#[serde(default)] CompetitionParams),
}

/// A scenario after construction.
#[derive(Debug, Clone)]
pub enum BuiltScenario {
    Elliptic(EllipticModel),
    Kinetic(KineticModel),
    Competition(CompetitionSystem),
}

pub const SCENARIO_NAMES: [&str; 5] = ["ou", "rotating", "double-well", "kinetic-quadratic", "competition"];

impl Scenario {
    /// Looks up `name` in the registry and parses its parameter block.
    pub fn from_name(name: &str, params: serde_json::Value) -> Result<Self> {
        if !SCENARIO_NAMES.contains(&name) {
            return Err(Error::UnknownScenario(name.to_string()));
        }
        let v = serde_json::json!({ "name": name, "params": params });
        Ok(serde_json::from_value(v)?)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Ou(_) => "ou",
            Scenario::Rotating(_) => "rotating",
            Scenario::DoubleWell(_) => "double-well",
            Scenario::KineticQuadratic(_) => "kinetic-quadratic",
            Scenario::Competition(_) => "competition",
        }
    }

    pub fn build(&self) -> Result<BuiltScenario> {
        Ok(match self {
            Scenario::Ou(p) => BuiltScenario::Elliptic(p.build()?),
            Scenario::Rotating(p) => BuiltScenario::Elliptic(p.build()?),
            Scenario::DoubleWell(p) => BuiltScenario::Elliptic(p.build()?),
            Scenario::KineticQuadratic(p) => BuiltScenario::Kinetic(p.build()?),
            Scenario::Competition(p) => BuiltScenario::Competition(p.build()?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{derive_elliptic_fields, StateVector};

    #[test]
    fn registry_round_trip() {
        let s = Scenario::from_name("ou", serde_json::json!({"dim": 3})).unwrap();
        assert_eq!(s.name(), "ou");
        assert!(matches!(s.build().unwrap(), BuiltScenario::Elliptic(m) if m.dim == 3));
        assert!(matches!(Scenario::from_name("nope", serde_json::json!({})), Err(Error::UnknownScenario(_))));
        assert!(Scenario::from_name("ou", serde_json::json!({"dimm": 3})).is_err());
    }

    #[test]
    fn rotating_drift_substitution() {
        let m = RotatingParams { f0: 1.0, ..Default::default() }.build().unwrap();
        let b = m.eval_drift(&StateVector(vec![1.0, 0.0])).unwrap();
        assert_eq!(b.0, vec![-1.0, -1.0]);
    }

    #[test]
    fn splits_sum_to_drift() {
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let s = i as f64 * 0.61;
                vec![2.0 * s.sin(), 1.5 * (0.7 * s).cos()]
            })
            .collect();
        for alt in [false, true] {
            let m = RotatingParams {
                f0: 0.8,
                f_width: Some(2.5),
                v_amp: 0.9,
                v_width: 1.7,
                alternative_split: alt,
                ..Default::default()
            }
            .build()
            .unwrap();
            assert!(m.split_deviation(&pts).unwrap() < 1e-10);
        }
        let ou = OuParams { dim: 2, bump: Some(BumpParams { amplitude: 0.5, width: 1.5 }), ..Default::default() }
            .build()
            .unwrap();
        assert!(ou.split_deviation(&pts).unwrap() < 1e-10);
    }

    #[test]
    fn bump_derivatives_match_differences() {
        let (a, w) = (0.8, 1.9);
        for i in 0..50 {
            let t = i as f64 * 0.3;
            let x = [1.2 * t.sin(), 0.9 * (1.3 * t).cos(), 0.4 * t.cos()];
            let (_, g, lap) = bump(&x, a, w);
            let h = 1e-4;
            let mut fd_lap = 0.0;
            for k in 0..3 {
                let mut xp = x;
                xp[k] += h;
                let mut xm = x;
                xm[k] -= h;
                let (vp, ..) = bump(&xp, a, w);
                let (vm, ..) = bump(&xm, a, w);
                let v0 = bump(&x, a, w).0;
                assert!((g[k] - (vp - vm) / (2.0 * h)).abs() < 1e-6);
                fd_lap += (vp - 2.0 * v0 + vm) / (h * h);
            }
            assert!((lap - fd_lap).abs() < 1e-4);
        }
    }

    #[test]
    fn ou_bump_potential_bounds_cover_samples() {
        let m = OuParams { dim: 2, bump: Some(BumpParams { amplitude: 0.6, width: 1.5 }), ..Default::default() }
            .build()
            .unwrap();
        let f = derive_elliptic_fields(&m, 1e-5).unwrap();
        for i in 0..300 {
            let t = i as f64 * 0.05;
            let x = [t.cos() * t / 10.0, t.sin() * t / 10.0];
            assert!((f.potential)(&x).abs() <= m.m_phi + 1e-9);
        }
        assert!(m.m_phi > 0.0 && m.l_phi > 0.0);
    }
}
