//! SDE models, drift fields and the named scenarios.
//!
//! Elliptic models follow `dZ = b(Z) dt + σ dB` with scalar `σ`; kinetic models
//! follow `dX = V dt`, `dV = (-∇U(X) + G(X, V) - γV) dt + sqrt(2γ) dB`.

mod competition;
mod elliptic;
mod kinetic;
mod probe;
pub mod scenarios;

use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use competition::{make_competition_drift, CompetitionDrift, CompetitionKernel};
pub use elliptic::{derive_elliptic_fields, DerivedEllipticFields, DriftSplit, EllipticModel};
pub(crate) use kinetic::spectrum;
pub use kinetic::{normalize_kinetic, KineticLipschitz, KineticModel, NormalizedKineticModel};
pub use probe::{probe_one_sided_condition, ClassStats, OneSidedReport, PairSampler};

/// `x ↦ out`, writes a vector field evaluated at `x` into `out`.
pub type VecField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `x ↦ value`.
pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// `(x, v) ↦ out` on phase space.
pub type PhaseField = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(x, v) ↦ value` on phase space.
pub type PhaseScalar = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// A point of the state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("state vector"));
        }
        Ok(StateVector(coords))
    }

    pub fn zeros(dim: usize) -> Self {
        StateVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for StateVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for StateVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for StateVector {
    fn from(v: Vec<f64>) -> Self {
        StateVector(v)
    }
}

/// Contraction-at-infinity parameters `(ρ, L, R)` of the one-sided condition
/// `(b(x) - b(y))·(x - y) ≤ -ρ|x - y|²` far away and `≤ L|x - y|²` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Structural {
    pub rho: f64,
    pub l: f64,
    pub r: f64,
}

impl Structural {
    pub fn new(rho: f64, l: f64, r: f64) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::param("rho", format!("must be positive, got {rho}")));
        }
        if !(r >= 0.0) || !r.is_finite() {
            return Err(Error::param("R", format!("must be nonnegative, got {r}")));
        }
        if !l.is_finite() {
            return Err(Error::param("L", "must be finite"));
        }
        Ok(Structural { rho, l, r })
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Central-difference divergence of a vector field.
pub fn fd_divergence(field: &VecField, x: &[f64], h: f64) -> f64 {
    let d = x.len();
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    let mut div = 0.0;
    for i in 0..d {
        xp[i] = x[i] + h;
        field(&xp, &mut fp);
        xp[i] = x[i] - h;
        field(&xp, &mut fm);
        xp[i] = x[i];
        div += (fp[i] - fm[i]) / (2.0 * h);
    }
    div
}
