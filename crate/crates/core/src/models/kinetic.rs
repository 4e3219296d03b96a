use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{check_dim, PhaseField, PhaseScalar, StateVector, VecField};
use crate::error::{Error, Result};

/// Piecewise Lipschitz data of the residual `g`: constant `L₁` when
/// `|δx| + |δv| ≤ R`, `L₂` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticLipschitz {
    pub r: f64,
    pub l1: f64,
    pub l2: f64,
}

/// Kinetic Langevin model
/// `dX = V dt`, `dV = (-∇U(X) + G(X, V) - γV) dt + sqrt(2γ) dB`,
/// with the decomposition `-∇U(x) + G(x, -v) = -Kx + g(x, v)`.
#[derive(Clone)]
pub struct KineticModel {
    pub name: String,
    pub dim: usize,
    pub gamma: f64,
    pub grad_u: VecField,
    /// Non-gradient forcing `G(x, v)`.
    pub forcing: PhaseField,
    /// Closed-form `∇_v·G`, central differences otherwise.
    pub forcing_div_v: Option<PhaseScalar>,
    pub stiffness: DMatrix<f64>,
    pub residual: PhaseField,
    pub lipschitz: KineticLipschitz,
    pub l_phi: f64,
    pub c0: Option<f64>,
    k_min: f64,
    k_norm: f64,
}

impl fmt::Debug for KineticModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KineticModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("gamma", &self.gamma)
            .field("stiffness", &self.stiffness)
            .field("lipschitz", &self.lipschitz)
            .field("l_phi", &self.l_phi)
            .finish()
    }
}

/// Smallest eigenvalue and operator norm of a symmetric matrix.
pub(crate) fn spectrum(k: &DMatrix<f64>) -> Result<(f64, f64)> {
    if !k.is_square() {
        return Err(Error::param("K", "must be square"));
    }
    let asym = (k - k.transpose()).abs().max();
    if asym > 1e-12 * (1.0 + k.abs().max()) {
        return Err(Error::param("K", format!("must be symmetric (asymmetry {asym:e})")));
    }
    let eig = SymmetricEigen::new(k.clone());
    let k_min = eig.eigenvalues.min();
    let k_norm = eig.eigenvalues.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
    Ok((k_min, k_norm))
}

impl KineticModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        gamma: f64,
        grad_u: VecField,
        forcing: PhaseField,
        stiffness: DMatrix<f64>,
        residual: PhaseField,
        lipschitz: KineticLipschitz,
    ) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::param("gamma", format!("must be positive, got {gamma}")));
        }
        let (k_min, k_norm) = spectrum(&stiffness)?;
        if !(k_min > 0.0) {
            return Err(Error::param("K", format!("must be positive definite (k = {k_min})")));
        }
        let KineticLipschitz { r, l1, l2 } = lipschitz;
        if !(r >= 0.0 && l1 >= 0.0 && l2 >= 0.0) {
            return Err(Error::param("R/L1/L2", "must be nonnegative"));
        }
        if l2 > l1 {
            return Err(Error::param("L2", format!("must not exceed L1 ({l2} > {l1})")));
        }
        Ok(KineticModel {
            name: name.into(),
            dim: stiffness.nrows(),
            gamma,
            grad_u,
            forcing,
            forcing_div_v: None,
            stiffness,
            residual,
            lipschitz,
            l_phi: 0.0,
            c0: None,
            k_min,
            k_norm,
        })
    }

    pub fn with_forcing_div_v(mut self, div: PhaseScalar) -> Self {
        self.forcing_div_v = Some(div);
        self
    }

    pub fn with_l_phi(mut self, l_phi: f64) -> Self {
        self.l_phi = l_phi;
        self
    }

    pub fn with_reference_lsi(mut self, c0: f64) -> Self {
        self.c0 = Some(c0);
        self
    }

    /// Smallest eigenvalue `k` of `K`.
    pub fn k_min(&self) -> f64 {
        self.k_min
    }

    /// Operator norm `|K|`.
    pub fn k_norm(&self) -> f64 {
        self.k_norm
    }

    /// `19·max(1, γ)·L₂ ≤ min(1, k)`.
    pub fn admissible(&self) -> bool {
        admissible(self.gamma, self.lipschitz.l2, self.k_min)
    }

    /// Full drift `(v, -∇U(x) + G(x, v) - γv)` on `z = (x, v)`.
    pub fn eval_drift(&self, state: &StateVector) -> Result<StateVector> {
        check_dim(2 * self.dim, state.dim())?;
        let mut out = vec![0.0; 2 * self.dim];
        self.drift_into(state, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kinetic drift"));
        }
        Ok(StateVector(out))
    }

    pub(crate) fn drift_into(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let (x, v) = z.split_at(d);
        let (ox, ov) = out.split_at_mut(d);
        ox.copy_from_slice(v);
        self.force_into(x, v, ov);
        for i in 0..d {
            ov[i] -= self.gamma * v[i];
        }
    }

    /// Force `-∇U(x) + G(x, v)`.
    pub(crate) fn force_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let mut g = vec![0.0; x.len()];
        (self.grad_u)(x, out);
        (self.forcing)(x, v, &mut g);
        for (o, gi) in out.iter_mut().zip(&g) {
            *o = -*o + gi;
        }
    }

    /// Largest deviation of `-∇U(x) + G(x, -v)` from `-Kx + g(x, v)` over the points.
    pub fn decomposition_deviation(&self, points: &[Vec<f64>]) -> Result<f64> {
        let d = self.dim;
        let mut lhs = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut worst = 0.0_f64;
        for p in points {
            check_dim(2 * d, p.len())?;
            let (x, v) = p.split_at(d);
            let neg_v: Vec<f64> = v.iter().map(|a| -a).collect();
            self.force_into(x, &neg_v, &mut lhs);
            (self.residual)(x, v, &mut g);
            for i in 0..d {
                let kx: f64 = (0..d).map(|j| self.stiffness[(i, j)] * x[j]).sum();
                worst = worst.max((lhs[i] - (-kx + g[i])).abs());
            }
        }
        Ok(worst)
    }

    /// `φ(x, v) = -∇_v·G(x, v) + G(x, v)·v`.
    pub fn potential(&self, x: &[f64], v: &[f64], fd_step: f64) -> f64 {
        let d = self.dim;
        let mut g = vec![0.0; d];
        (self.forcing)(x, v, &mut g);
        let gv: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
        let div = match &self.forcing_div_v {
            Some(div) => div(x, v),
            None => {
                let mut vp = v.to_vec();
                let (mut gp, mut gm) = (vec![0.0; d], vec![0.0; d]);
                let mut acc = 0.0;
                for i in 0..d {
                    vp[i] = v[i] + fd_step;
                    (self.forcing)(x, &vp, &mut gp);
                    vp[i] = v[i] - fd_step;
                    (self.forcing)(x, &vp, &mut gm);
                    vp[i] = v[i];
                    acc += (gp[i] - gm[i]) / (2.0 * fd_step);
                }
                acc
            }
        };
        -div + gv
    }
}

pub(crate) fn admissible(gamma: f64, l2: f64, k_min: f64) -> bool {
    19.0 * gamma.max(1.0) * l2 <= k_min.min(1.0)
}

/// The γ = 1, unit-noise form of a kinetic model obtained with time `s = γt`
/// and position `x̃ = γx` (velocities unchanged). The simulated force is
/// `-K̃x̃ + h̃(x̃, ṽ)` with `K̃ = K/γ²`.
#[derive(Clone)]
pub struct NormalizedKineticModel {
    pub dim: usize,
    pub stiffness: DMatrix<f64>,
    /// Forward-force residual `h̃`; `h̃(x̃, ṽ) = g̃(x̃, -ṽ)` with `g̃` the
    /// normalized decomposition residual.
    pub residual: PhaseField,
    /// Lipschitz data of `h̃` in normalized coordinates.
    pub lipschitz: KineticLipschitz,
    /// Original friction γ, i.e. the time/space scale factor.
    pub scale: f64,
    k_min: f64,
    k_norm: f64,
}

impl fmt::Debug for NormalizedKineticModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NormalizedKineticModel")
            .field("dim", &self.dim)
            .field("stiffness", &self.stiffness)
            .field("lipschitz", &self.lipschitz)
            .field("scale", &self.scale)
            .finish()
    }
}

impl NormalizedKineticModel {
    /// Normalized model with `h̃ ≡ 0`, i.e. the linear kinetic process.
    pub fn linear(stiffness: DMatrix<f64>, r: f64) -> Result<Self> {
        let (k_min, k_norm) = spectrum(&stiffness)?;
        if !(k_min > 0.0) {
            return Err(Error::param("K", "must be positive definite"));
        }
        Ok(NormalizedKineticModel {
            dim: stiffness.nrows(),
            stiffness,
            residual: Arc::new(|_x: &[f64], _v: &[f64], o: &mut [f64]| o.fill(0.0)),
            lipschitz: KineticLipschitz { r, l1: 0.0, l2: 0.0 },
            scale: 1.0,
            k_min,
            k_norm,
        })
    }

    pub fn k_min(&self) -> f64 {
        self.k_min
    }

    pub fn k_norm(&self) -> f64 {
        self.k_norm
    }

    pub fn admissible(&self) -> bool {
        admissible(1.0, self.lipschitz.l2, self.k_min)
    }

    /// Force `-K̃x + h̃(x, v)` in normalized coordinates.
    pub(crate) fn force_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        (self.residual)(x, v, out);
        let d = self.dim;
        for i in 0..d {
            let mut kx = 0.0;
            for j in 0..d {
                kx += self.stiffness[(i, j)] * x[j];
            }
            out[i] -= kx;
        }
    }

    /// Maps an original-coordinate phase point `(x, v)` to normalized coordinates.
    pub fn to_normalized(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim;
        z.iter().enumerate().map(|(i, &c)| if i < d { c * self.scale } else { c }).collect()
    }

    /// Inverse of [`Self::to_normalized`].
    pub fn to_original(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim;
        z.iter().enumerate().map(|(i, &c)| if i < d { c / self.scale } else { c }).collect()
    }

    /// Normalized time corresponding to original time `t`.
    pub fn normalized_time(&self, t: f64) -> f64 {
        self.scale * t
    }
}

/// Rescales a kinetic model to unit friction and noise `sqrt(2)`.
pub fn normalize_kinetic(model: &KineticModel) -> Result<NormalizedKineticModel> {
    let gamma = model.gamma;
    if !(gamma > 0.0) {
        return Err(Error::param("gamma", "must be positive"));
    }
    let d = model.dim;
    let k = model.stiffness.clone();
    let k_tilde = &k / (gamma * gamma);
    let grad_u = model.grad_u.clone();
    let forcing = model.forcing.clone();
    let kk = k.clone();
    // h̃(x̃, ṽ) = γ⁻¹ [ -∇U(x̃/γ) + G(x̃/γ, ṽ) + K x̃/γ ]
    let residual: PhaseField = Arc::new(move |xt: &[f64], vt: &[f64], out: &mut [f64]| {
        let x: Vec<f64> = xt.iter().map(|c| c / gamma).collect();
        let mut g = vec![0.0; d];
        grad_u(&x, out);
        forcing(&x, vt, &mut g);
        for i in 0..d {
            let kx: f64 = (0..d).map(|j| kk[(i, j)] * x[j]).sum();
            out[i] = (-out[i] + g[i] + kx) / gamma;
        }
    });
    let KineticLipschitz { r, l1, l2 } = model.lipschitz;
    let lip_scale = (1.0 / gamma).max(1.0) / gamma;
    let lipschitz = KineticLipschitz { r: r * gamma.max(1.0), l1: l1 * lip_scale, l2: l2 * lip_scale };
    let (k_min, k_norm) = spectrum(&k_tilde)?;
    Ok(NormalizedKineticModel { dim: d, stiffness: k_tilde, residual, lipschitz, scale: gamma, k_min, k_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::scenarios::KineticQuadraticParams;

    fn quad(gamma: f64) -> KineticModel {
        KineticQuadraticParams { dim: 2, gamma, ..Default::default() }.build().unwrap()
    }

    #[test]
    fn drift_of_quadratic_model() {
        let m = quad(1.0);
        let out = m.eval_drift(&StateVector(vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(&out[..2], &[0.0, 1.0]);
        assert_eq!(&out[2..], &[-1.0, -1.0]);
    }

    #[test]
    fn admissibility_flag() {
        let mut m = quad(1.0);
        assert!(m.admissible());
        m.lipschitz.l2 = 1.0 / 19.0;
        m.lipschitz.l1 = 1.0;
        assert!(m.admissible());
        m.lipschitz.l2 = 1.0 / 19.0 + 1e-9;
        assert!(!m.admissible());
    }

    #[test]
    fn rejects_bad_parameters() {
        let z: PhaseField = Arc::new(|_x: &[f64], _v: &[f64], o: &mut [f64]| o.fill(0.0));
        let gu: VecField = Arc::new(|x: &[f64], o: &mut [f64]| o.copy_from_slice(x));
        let lip = KineticLipschitz { r: 1.0, l1: 0.0, l2: 0.0 };
        let id = DMatrix::<f64>::identity(1, 1);
        assert!(KineticModel::new("k", 0.0, gu.clone(), z.clone(), id.clone(), z.clone(), lip).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(KineticModel::new("k", 1.0, gu.clone(), z.clone(), asym, z.clone(), lip).is_err());
        let bad = KineticLipschitz { r: 1.0, l1: 0.0, l2: 0.1 };
        assert!(KineticModel::new("k", 1.0, gu, z.clone(), id, z, bad).is_err());
    }

    #[test]
    fn decomposition_holds_on_samples() {
        let m =
            KineticQuadraticParams { dim: 2, gamma: 1.5, friction_amp: 0.02, ..Default::default() }.build().unwrap();
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let s = i as f64 * 0.37;
                vec![s.sin() * 3.0, s.cos(), (2.0 * s).sin(), -s.cos() * 2.0]
            })
            .collect();
        assert!(m.decomposition_deviation(&pts).unwrap() < 1e-10);
    }

    #[test]
    fn unit_friction_normalization_is_identity() {
        let m = quad(1.0);
        let n = normalize_kinetic(&m).unwrap();
        assert_eq!(n.stiffness, m.stiffness);
        let z = [0.3, -0.2, 1.0, 0.5];
        assert_eq!(n.to_normalized(&z), z.to_vec());
        let mut f1 = [0.0; 2];
        let mut f2 = [0.0; 2];
        n.force_into(&z[..2], &z[2..], &mut f1);
        m.force_into(&z[..2], &z[2..], &mut f2);
        assert!((f1[0] - f2[0]).abs() < 1e-15 && (f1[1] - f2[1]).abs() < 1e-15);
    }

    #[test]
    fn normalized_stiffness_scales_with_friction() {
        let n = normalize_kinetic(&quad(2.0)).unwrap();
        assert!((n.stiffness[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((n.k_min() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn potential_matches_closed_form() {
        let c = 0.03;
        let m = KineticQuadraticParams { dim: 2, gamma: 1.0, friction_amp: c, ..Default::default() }.build().unwrap();
        let (x, v) = ([0.1, 0.2], [0.7, -1.1]);
        let n2: f64 = v.iter().map(|a| a * a).sum();
        let s = (1.0 + n2).sqrt();
        // G = -c v / s, ∇_v·G = -c (d/s - |v|²/s³)
        let div = -c * (2.0 / s - n2 / (s * s * s));
        let expect = -div + (-c * n2 / s);
        assert!((m.potential(&x, &v, 1e-5) - expect).abs() < 1e-8);
    }
}
