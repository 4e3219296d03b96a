use serde::{Deserialize, Serialize};

use super::{dist, EllipticModel, Structural};
use crate::rng::{Channel, NoiseStream};

/// How probe pairs are drawn. Half of the pairs take `y` independently of `x`,
/// the other half place `y` uniformly in the ball of radius `R` around `x`, so
/// that both the near and the far class get populated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairSampler {
    UniformBox { half_width: f64, seed: u64 },
    Gaussian { std: f64, seed: u64 },
}

impl PairSampler {
    fn draw(&self, s: &mut NoiseStream, out: &mut [f64]) {
        match *self {
            PairSampler::UniformBox { half_width, .. } => {
                for o in out.iter_mut() {
                    *o = half_width * (2.0 * s.uniform() - 1.0);
                }
            }
            PairSampler::Gaussian { std, .. } => {
                for o in out.iter_mut() {
                    *o = std * s.normal();
                }
            }
        }
    }

    fn seed(&self) -> u64 {
        match *self {
            PairSampler::UniformBox { seed, .. } | PairSampler::Gaussian { seed, .. } => seed,
        }
    }
}

/// Ratio statistics `(b(x) - b(y))·(x - y) / |x - y|²` over one class of pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub count: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub argmax: Option<(Vec<f64>, Vec<f64>)>,
}

impl ClassStats {
    fn push(&mut self, ratio: f64, x: &[f64], y: &[f64]) {
        self.count += 1;
        self.min = Some(self.min.map_or(ratio, |m| m.min(ratio)));
        if self.max.is_none_or(|m| ratio > m) {
            self.max = Some(ratio);
            self.argmax = Some((x.to_vec(), y.to_vec()));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneSidedReport {
    pub declared: Structural,
    pub n_pairs: usize,
    /// Pairs with `|x - y| ≥ R`.
    pub far: ClassStats,
    /// Pairs with `|x - y| < R`.
    pub near: ClassStats,
    pub far_violation: bool,
    pub near_violation: bool,
    pub violated: bool,
}

fn ratio(model: &EllipticModel, x: &[f64], y: &[f64], bx: &mut [f64], by: &mut [f64]) -> Option<f64> {
    let r = dist(x, y);
    if r == 0.0 {
        return None;
    }
    (model.drift)(x, bx);
    (model.drift)(y, by);
    let num: f64 = (0..x.len()).map(|i| (bx[i] - by[i]) * (x[i] - y[i])).sum();
    Some(num / (r * r))
}

/// Compass search that pushes the ratio of the worst pair up while keeping the
/// pair inside its class.
fn refine(model: &EllipticModel, start: (Vec<f64>, Vec<f64>), far: bool, r_split: f64, scale: f64) -> Option<f64> {
    let d = model.dim;
    let (mut bx, mut by) = (vec![0.0; d], vec![0.0; d]);
    let mut p: Vec<f64> = start.0.iter().chain(start.1.iter()).copied().collect();
    let in_class = |p: &[f64]| {
        let r = dist(&p[..d], &p[d..]);
        r > 0.0 && if far { r >= r_split } else { r < r_split }
    };
    let mut best = ratio(model, &p[..d], &p[d..], &mut bx, &mut by)?;
    let mut step = 0.1 * scale.max(1e-3);
    let mut evals = 0usize;
    while step > 1e-9 * scale.max(1e-3) && evals < 200_000 {
        let mut improved = false;
        for i in 0..2 * d {
            for sgn in [1.0, -1.0] {
                let old = p[i];
                p[i] = old + sgn * step;
                evals += 1;
                if in_class(&p) {
                    if let Some(r) = ratio(model, &p[..d], &p[d..], &mut bx, &mut by) {
                        if r.is_finite() && r > best {
                            best = r;
                            improved = true;
                            continue;
                        }
                    }
                }
                p[i] = old;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Some(best)
}

/// Samples pairs and reports the extreme one-sided ratios per class, with a
/// local refinement of the worst pair in each class. Flags a violation when
/// the far class exceeds `-ρ` or the near class exceeds `L`.
pub fn probe_one_sided_condition(
    model: &EllipticModel,
    declared: Structural,
    sampler: &PairSampler,
    n_pairs: usize,
) -> OneSidedReport {
    let d = model.dim;
    let r_split = declared.r;
    let mut s = NoiseStream::new(sampler.seed(), 0, Channel::Sampling);
    let (mut x, mut y) = (vec![0.0; d], vec![0.0; d]);
    let (mut bx, mut by) = (vec![0.0; d], vec![0.0; d]);
    let mut far = ClassStats::default();
    let mut near = ClassStats::default();
    let mut scale = 0.0_f64;
    for k in 0..n_pairs.max(1) {
        sampler.draw(&mut s, &mut x);
        if k % 2 == 1 && r_split > 0.0 {
            // uniform direction, radius uniform in [0, R)
            s.fill_normal(&mut y);
            let n = super::norm(&y).max(1e-300);
            let rad = r_split * s.uniform();
            for i in 0..d {
                y[i] = x[i] + rad * y[i] / n;
            }
        } else {
            sampler.draw(&mut s, &mut y);
        }
        scale = scale.max(dist(&x, &y));
        if let Some(r) = ratio(model, &x, &y, &mut bx, &mut by) {
            if dist(&x, &y) >= r_split {
                far.push(r, &x, &y);
            } else {
                near.push(r, &x, &y);
            }
        }
    }
    for (class, is_far) in [(&mut far, true), (&mut near, false)] {
        if let Some(arg) = class.argmax.clone() {
            if let Some(r) = refine(model, arg, is_far, r_split, scale) {
                if class.max.is_none_or(|m| r > m) {
                    class.max = Some(r);
                }
            }
        }
    }
    // ratios carry rounding of order 1e-15 relative
    let slack = |t: f64| 1e-12 * t.abs().max(1.0);
    let far_violation = far.max.is_some_and(|m| m > -declared.rho + slack(declared.rho));
    let near_violation = near.max.is_some_and(|m| m > declared.l + slack(declared.l));
    OneSidedReport {
        declared,
        n_pairs,
        far,
        near,
        far_violation,
        near_violation,
        violated: far_violation || near_violation,
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::models::VecField;

    fn linear(a: Vec<f64>, d: usize) -> EllipticModel {
        let drift: VecField = Arc::new(move |x: &[f64], o: &mut [f64]| {
            for i in 0..d {
                o[i] = -(0..d).map(|j| a[i * d + j] * x[j]).sum::<f64>();
            }
        });
        EllipticModel::new("lin", d, 1.0, Structural::new(1.0, 0.0, 0.0).unwrap(), drift).unwrap()
    }

    #[test]
    fn ou_ratio_is_identically_minus_one() {
        let m = linear(vec![1.0, 0.0, 0.0, 1.0], 2);
        let decl = Structural { rho: 1.0, l: -1.0, r: 1.0 };
        let rep = probe_one_sided_condition(&m, decl, &PairSampler::UniformBox { half_width: 5.0, seed: 1 }, 2000);
        for c in [&rep.far, &rep.near] {
            assert!(c.count > 100);
            assert!((c.max.unwrap() + 1.0).abs() < 1e-12);
            assert!((c.min.unwrap() + 1.0).abs() < 1e-12);
        }
        assert!(!rep.violated);
    }

    #[test]
    fn misdeclared_rate_is_flagged() {
        let m = linear(vec![1.0], 1);
        let decl = Structural { rho: 1.5, l: 0.0, r: 0.5 };
        let rep = probe_one_sided_condition(&m, decl, &PairSampler::Gaussian { std: 2.0, seed: 2 }, 500);
        assert!(rep.far_violation && rep.violated);
    }
}
