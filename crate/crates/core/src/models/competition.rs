use std::fmt;
use std::sync::Arc;

use super::check_dim;
use crate::error::{Error, Result};

type KernelFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type KernelGrad = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Interaction kernel `K(x₁, x₂)` on `R^p × R^p` with its two partial gradients.
#[derive(Clone)]
pub struct CompetitionKernel {
    pub p: usize,
    pub value: KernelFn,
    pub grad_first: KernelGrad,
    pub grad_second: KernelGrad,
    /// Declared `sup |∇K|` (metadata).
    pub grad_bound: Option<f64>,
    /// Declared `sup |∇²K|` (metadata).
    pub hess_bound: Option<f64>,
}

impl fmt::Debug for CompetitionKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompetitionKernel")
            .field("p", &self.p)
            .field("grad_bound", &self.grad_bound)
            .field("hess_bound", &self.hess_bound)
            .finish_non_exhaustive()
    }
}

impl CompetitionKernel {
    pub fn zero(p: usize) -> Self {
        CompetitionKernel {
            p,
            value: Arc::new(|_a: &[f64], _b: &[f64]| 0.0),
            grad_first: Arc::new(|_a: &[f64], _b: &[f64], o: &mut [f64]| o.fill(0.0)),
            grad_second: Arc::new(|_a: &[f64], _b: &[f64], o: &mut [f64]| o.fill(0.0)),
            grad_bound: Some(0.0),
            hess_bound: Some(0.0),
        }
    }

    /// `K(x₁, x₂) = x₁·x₂`.
    pub fn bilinear(p: usize) -> Self {
        CompetitionKernel {
            p,
            value: Arc::new(|a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum()),
            grad_first: Arc::new(|_a: &[f64], b: &[f64], o: &mut [f64]| o.copy_from_slice(b)),
            grad_second: Arc::new(|a: &[f64], _b: &[f64], o: &mut [f64]| o.copy_from_slice(a)),
            grad_bound: None,
            hess_bound: Some(1.0),
        }
    }

    /// `K(x₁, x₂) = scale · Σᵢ arctan(x₁ᵢ - x₂ᵢ)`, whose gradient decays like
    /// `1/(1 + |x₁ - x₂|²)` componentwise.
    pub fn arctan(p: usize, scale: f64) -> Self {
        CompetitionKernel {
            p,
            value: Arc::new(move |a: &[f64], b: &[f64]| {
                scale * a.iter().zip(b).map(|(x, y)| (x - y).atan()).sum::<f64>()
            }),
            grad_first: Arc::new(move |a: &[f64], b: &[f64], o: &mut [f64]| {
                for i in 0..o.len() {
                    let u = a[i] - b[i];
                    o[i] = scale / (1.0 + u * u);
                }
            }),
            grad_second: Arc::new(move |a: &[f64], b: &[f64], o: &mut [f64]| {
                for i in 0..o.len() {
                    let u = a[i] - b[i];
                    o[i] = -scale / (1.0 + u * u);
                }
            }),
            grad_bound: Some(scale.abs() * (p as f64).sqrt()),
            // |d²/du² arctan u| ≤ 3√3/8
            hess_bound: Some(scale.abs() * 3.0 * 3f64.sqrt() / 8.0 * 2.0),
        }
    }

    /// Largest gap between supplied gradients and central differences of `K`.
    pub fn gradient_check(&self, points: &[(Vec<f64>, Vec<f64>)], h: f64) -> Result<f64> {
        let p = self.p;
        let (mut g1, mut g2) = (vec![0.0; p], vec![0.0; p]);
        let mut worst = 0.0_f64;
        for (a, b) in points {
            check_dim(p, a.len())?;
            check_dim(p, b.len())?;
            (self.grad_first)(a, b, &mut g1);
            (self.grad_second)(a, b, &mut g2);
            let (mut ap, mut bp) = (a.clone(), b.clone());
            for i in 0..p {
                ap[i] = a[i] + h;
                let fp = (self.value)(&ap, b);
                ap[i] = a[i] - h;
                let fm = (self.value)(&ap, b);
                ap[i] = a[i];
                worst = worst.max((g1[i] - (fp - fm) / (2.0 * h)).abs());

                bp[i] = b[i] + h;
                let fp = (self.value)(a, &bp);
                bp[i] = b[i] - h;
                let fm = (self.value)(a, &bp);
                bp[i] = b[i];
                worst = worst.max((g2[i] - (fp - fm) / (2.0 * h)).abs());
            }
        }
        Ok(worst)
    }
}

/// Interaction drift `b_μ̂` of an empirical measure of particles in `R^{2p}`.
#[derive(Clone)]
pub struct CompetitionDrift {
    kernel: CompetitionKernel,
    particles: Vec<Vec<f64>>,
}

impl fmt::Debug for CompetitionDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompetitionDrift")
            .field("kernel", &self.kernel)
            .field("n_particles", &self.particles.len())
            .finish()
    }
}

impl CompetitionDrift {
    pub fn dim(&self) -> usize {
        2 * self.kernel.p
    }

    pub fn particles(&self) -> &[Vec<f64>] {
        &self.particles
    }

    /// First block: mean of `∇_{x₁}K(x₁, y₂)`; second block: minus the mean of
    /// `∇_{x₂}K(y₁, x₂)`, both over particles `y = (y₁, y₂)`.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let p = self.kernel.p;
        let (x1, x2) = x.split_at(p);
        out.fill(0.0);
        let mut g = vec![0.0; p];
        for y in &self.particles {
            let (y1, y2) = y.split_at(p);
            (self.kernel.grad_first)(x1, y2, &mut g);
            for i in 0..p {
                out[i] += g[i];
            }
            (self.kernel.grad_second)(y1, x2, &mut g);
            for i in 0..p {
                out[p + i] -= g[i];
            }
        }
        let n = self.particles.len() as f64;
        for o in out.iter_mut() {
            *o /= n;
        }
    }
}

pub fn make_competition_drift(kernel: &CompetitionKernel, particles: Vec<Vec<f64>>) -> Result<CompetitionDrift> {
    if particles.is_empty() {
        return Err(Error::param("particles", "empirical measure needs at least one particle"));
    }
    for p in &particles {
        check_dim(2 * kernel.p, p.len())?;
    }
    Ok(CompetitionDrift { kernel: kernel.clone(), particles })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_kernel_gives_zero_drift() {
        let d = make_competition_drift(&CompetitionKernel::zero(2), vec![vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let mut out = [9.0; 4];
        d.eval(&[0.5, 0.1, -1.0, 2.0], &mut out);
        assert_eq!(out, [0.0; 4]);
    }

    #[test]
    fn bilinear_single_particle() {
        let (a, b) = (vec![1.5, -2.0], vec![0.25, 3.0]);
        let mut y = a.clone();
        y.extend(&b);
        let d = make_competition_drift(&CompetitionKernel::bilinear(2), vec![y]).unwrap();
        let mut out = [0.0; 4];
        d.eval(&[7.0, 8.0, 9.0, 10.0], &mut out);
        assert_eq!(out, [0.25, 3.0, -1.5, 2.0]);
    }

    #[test]
    fn arctan_two_particles_direct_sum() {
        let k = CompetitionKernel::arctan(1, 1.0);
        let parts = vec![vec![0.5, -1.0], vec![-0.3, 2.0]];
        let d = make_competition_drift(&k, parts.clone()).unwrap();
        let x = [0.7, 0.2];
        let mut out = [0.0; 2];
        d.eval(&x, &mut out);
        // ∂₁ arctan(x₁ - y₂) = 1/(1 + (x₁ - y₂)²); ∂₂ arctan(y₁ - x₂) = -1/(1 + (y₁ - x₂)²)
        let first = 0.5 * parts.iter().map(|y| 1.0 / (1.0 + (x[0] - y[1]).powi(2))).sum::<f64>();
        let second = 0.5 * parts.iter().map(|y| 1.0 / (1.0 + (y[0] - x[1]).powi(2))).sum::<f64>();
        assert!((out[0] - first).abs() < 1e-15);
        assert!((out[1] - second).abs() < 1e-15);
    }

    #[test]
    fn empty_particles_rejected() {
        assert!(make_competition_drift(&CompetitionKernel::zero(1), vec![]).is_err());
    }

    #[test]
    fn supplied_gradients_match_differences() {
        let pts: Vec<(Vec<f64>, Vec<f64>)> = (0..100)
            .map(|i| {
                let s = i as f64 * 0.173;
                (vec![s.sin() * 2.0, s.cos()], vec![(3.0 * s).cos(), -s])
            })
            .collect();
        for k in [CompetitionKernel::arctan(2, 0.8), CompetitionKernel::bilinear(2)] {
            assert!(k.gradient_check(&pts, 1e-5).unwrap() < 1e-6);
        }
    }
}
