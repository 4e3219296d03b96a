use std::fmt;
use std::sync::Arc;

use super::{check_dim, dot, fd_divergence, ScalarField, StateVector, Structural, VecField};
use crate::error::{Error, Result};

/// Decomposition `b = b₀ + b₁` with an optional closed-form divergence of `b₁`.
#[derive(Clone)]
pub struct DriftSplit {
    pub base: VecField,
    pub perturbation: VecField,
    pub perturbation_div: Option<ScalarField>,
}

/// Elliptic diffusion `dZ = b(Z) dt + σ dB` together with the structural data
/// the perturbation and high-diffusivity results are stated in terms of.
#[derive(Clone)]
pub struct EllipticModel {
    pub name: String,
    pub dim: usize,
    pub drift: VecField,
    pub sigma: f64,
    pub structural: Structural,
    pub split: Option<DriftSplit>,
    /// `∇ ln μ₀` of the reference measure.
    pub grad_log_ref: Option<VecField>,
    /// Optional explicit `φ = φ₁ + φ₂` (bounded part, Lipschitz part).
    pub potential_split: Option<(ScalarField, ScalarField)>,
    pub m_phi: f64,
    pub l_phi: f64,
    pub c0: Option<f64>,
}

impl fmt::Debug for EllipticModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EllipticModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("sigma", &self.sigma)
            .field("structural", &self.structural)
            .field("has_split", &self.split.is_some())
            .field("has_grad_log_ref", &self.grad_log_ref.is_some())
            .field("m_phi", &self.m_phi)
            .field("l_phi", &self.l_phi)
            .finish()
    }
}

impl EllipticModel {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        sigma: f64,
        structural: Structural,
        drift: VecField,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("d", "dimension must be positive"));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::param("sigma", format!("must be positive, got {sigma}")));
        }
        Ok(EllipticModel {
            name: name.into(),
            dim,
            drift,
            sigma,
            structural,
            split: None,
            grad_log_ref: None,
            potential_split: None,
            m_phi: 0.0,
            l_phi: 0.0,
            c0: None,
        })
    }

    pub fn with_split(mut self, split: DriftSplit) -> Self {
        self.split = Some(split);
        self
    }

    pub fn with_grad_log_ref(mut self, g: VecField) -> Self {
        self.grad_log_ref = Some(g);
        self
    }

    pub fn with_potential_split(mut self, bounded: ScalarField, lipschitz: ScalarField) -> Self {
        self.potential_split = Some((bounded, lipschitz));
        self
    }

    pub fn with_perturbation_bounds(mut self, m_phi: f64, l_phi: f64) -> Self {
        self.m_phi = m_phi;
        self.l_phi = l_phi;
        self
    }

    pub fn with_reference_lsi(mut self, c0: f64) -> Self {
        self.c0 = Some(c0);
        self
    }

    /// Checked drift evaluation.
    pub fn eval_drift(&self, state: &StateVector) -> Result<StateVector> {
        check_dim(self.dim, state.dim())?;
        let mut out = vec![0.0; self.dim];
        (self.drift)(state, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("drift"));
        }
        Ok(StateVector(out))
    }

    /// Largest deviation `|b - (b₀ + b₁)|_∞` over the given points.
    pub fn split_deviation(&self, points: &[Vec<f64>]) -> Result<f64> {
        let split = self.split.as_ref().ok_or(Error::MissingComponent("drift split b = b0 + b1"))?;
        let d = self.dim;
        let (mut b, mut b0, mut b1) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut worst = 0.0_f64;
        for p in points {
            check_dim(d, p.len())?;
            (self.drift)(p, &mut b);
            (split.base)(p, &mut b0);
            (split.perturbation)(p, &mut b1);
            for i in 0..d {
                worst = worst.max((b[i] - b0[i] - b1[i]).abs());
            }
        }
        Ok(worst)
    }
}

/// The dual drift `b̃ = 2∇ln μ₀ - b` and potential `φ = -∇·b₁ - b₁·∇ln μ₀`,
/// so that `h = dμ/dμ₀` solves `Δh + b̃·∇h + φh = 0`.
#[derive(Clone)]
pub struct DerivedEllipticFields {
    pub dim: usize,
    pub dual_drift: VecField,
    pub potential: ScalarField,
    pub potential_split: Option<(ScalarField, ScalarField)>,
}

impl fmt::Debug for DerivedEllipticFields {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DerivedEllipticFields").field("dim", &self.dim).finish_non_exhaustive()
    }
}

/// Builds `b̃` and `φ` from the model's split and reference log-gradient.
/// Without a closed-form `∇·b₁`, central differences with step `fd_step` are used.
pub fn derive_elliptic_fields(model: &EllipticModel, fd_step: f64) -> Result<DerivedEllipticFields> {
    let grad_log = model.grad_log_ref.clone().ok_or(Error::MissingComponent("reference log-density gradient"))?;
    let split = model.split.clone().ok_or(Error::MissingComponent("drift split b = b0 + b1"))?;
    if !(fd_step > 0.0) {
        return Err(Error::param("fd_step", "must be positive"));
    }
    let d = model.dim;

    let drift = model.drift.clone();
    let gl = grad_log.clone();
    let dual_drift: VecField = Arc::new(move |x: &[f64], out: &mut [f64]| {
        let mut g = vec![0.0; x.len()];
        gl(x, &mut g);
        drift(x, out);
        for (o, gi) in out.iter_mut().zip(&g) {
            *o = 2.0 * gi - *o;
        }
    });

    let b1 = split.perturbation.clone();
    let div: ScalarField = match split.perturbation_div.clone() {
        Some(div) => div,
        None => {
            let b1 = b1.clone();
            Arc::new(move |x: &[f64]| fd_divergence(&b1, x, fd_step))
        }
    };
    let potential: ScalarField = Arc::new(move |x: &[f64]| {
        let mut g = vec![0.0; x.len()];
        let mut p = vec![0.0; x.len()];
        grad_log(x, &mut g);
        b1(x, &mut p);
        -div(x) - dot(&p, &g)
    });

    Ok(DerivedEllipticFields { dim: d, dual_drift, potential, potential_split: model.potential_split.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::scenarios::{bump, RotatingParams};
    use crate::rng::{Channel, NoiseStream};

    fn ou(d: usize) -> EllipticModel {
        let drift: VecField = Arc::new(|x: &[f64], o: &mut [f64]| {
            for (oi, xi) in o.iter_mut().zip(x) {
                *oi = -xi;
            }
        });
        EllipticModel::new("ou", d, 2f64.sqrt(), Structural::new(1.0, 0.0, 0.0).unwrap(), drift).unwrap()
    }

    #[test]
    fn ou_drift_value() {
        let m = ou(2);
        let b = m.eval_drift(&StateVector(vec![2.0, 0.0])).unwrap();
        assert_eq!(b.0, vec![-2.0, 0.0]);
        assert!(matches!(m.eval_drift(&StateVector(vec![1.0])), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn non_finite_drift_is_an_error() {
        let drift: VecField = Arc::new(|_x: &[f64], o: &mut [f64]| o[0] = f64::NAN);
        let m = EllipticModel::new("nan", 1, 1.0, Structural::new(1.0, 0.0, 0.0).unwrap(), drift).unwrap();
        assert!(matches!(m.eval_drift(&StateVector(vec![0.0])), Err(Error::NonFinite(_))));
    }

    #[test]
    fn missing_reference_gradient() {
        assert!(matches!(derive_elliptic_fields(&ou(1), 1e-5), Err(Error::MissingComponent(_))));
    }

    #[test]
    fn zero_perturbation_gives_zero_potential() {
        let zero: VecField = Arc::new(|_x: &[f64], o: &mut [f64]| o.fill(0.0));
        let neg: VecField = Arc::new(|x: &[f64], o: &mut [f64]| {
            for (oi, xi) in o.iter_mut().zip(x) {
                *oi = -xi;
            }
        });
        let m = ou(2)
            .with_split(DriftSplit { base: neg.clone(), perturbation: zero, perturbation_div: None })
            .with_grad_log_ref(neg);
        let f = derive_elliptic_fields(&m, 1e-5).unwrap();
        let x = [0.3, -1.2];
        assert_eq!((f.potential)(&x), 0.0);
        let mut bt = [0.0; 2];
        (f.dual_drift)(&x, &mut bt);
        // 2∇ln μ₀ - b₀ = -2x + x = -x
        assert!((bt[0] + 0.3).abs() < 1e-15 && (bt[1] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn rotating_potentials_match_closed_forms() {
        let p = RotatingParams {
            f0: 0.7,
            f_width: None,
            v_amp: 1.3,
            v_width: 2.0,
            alternative_split: false,
            ..Default::default()
        };
        let m = p.build().unwrap();
        let fields = derive_elliptic_fields(&m, 1e-5).unwrap();
        let mut s = NoiseStream::new(3, 0, Channel::Sampling);
        for _ in 0..200 {
            let x = [2.5 * s.normal(), 2.5 * s.normal()];
            let (_, gv, lap) = bump(&x, p.v_amp, p.v_width);
            // φ = ΔV - ∇V·x
            let expect = lap - gv[0] * x[0] - gv[1] * x[1];
            assert!(((fields.potential)(&x) - expect).abs() < 1e-6);
        }

        let p2 = RotatingParams { alternative_split: true, ..p };
        let m2 = p2.build().unwrap();
        let fields2 = derive_elliptic_fields(&m2, 1e-5).unwrap();
        for _ in 0..200 {
            let x = [2.5 * s.normal(), 2.5 * s.normal()];
            let (_, gv, _) = bump(&x, p.v_amp, p.v_width);
            // φ = f(|x|) x^⊥·∇V with x^⊥ = (x₂, -x₁)
            let expect = p.f0 * (x[1] * gv[0] - x[0] * gv[1]);
            assert!(((fields2.potential)(&x) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn stationary_density_ratio_solves_dual_equation() {
        use crate::models::scenarios::{BumpParams, OuParams};
        // μ ∝ e^{-x²/2 - V}, μ₀ ∝ e^{-x²/2}: h = e^{-V} is annihilated by Δ + b̃·∇ + φ
        let p = OuParams { bump: Some(BumpParams { amplitude: 0.6, width: 1.5 }), ..Default::default() };
        let m = p.build().unwrap();
        let f = derive_elliptic_fields(&m, 1e-5).unwrap();
        let h = |x: f64| (-bump(&[x], 0.6, 1.5).0).exp();
        let e = 1e-4;
        for i in 0..59 {
            let x = -1.45 + i as f64 * 0.05;
            let (hp, hm, h0) = (h(x + e), h(x - e), h(x));
            let mut bt = [0.0];
            (f.dual_drift)(&[x], &mut bt);
            let res = (hp - 2.0 * h0 + hm) / (e * e) + bt[0] * (hp - hm) / (2.0 * e) + (f.potential)(&[x]) * h0;
            assert!(res.abs() < 1e-5, "x = {x}: residual {res}");
        }
    }
}
