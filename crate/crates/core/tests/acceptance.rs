//! One PASS/FAIL line per acceptance criterion, at the stated tolerances and
//! budgets. Oracles are written here, independently of the library.
//!
//! Runs without the libtest harness so the lines always reach stdout.

use std::f64::consts::{PI, SQRT_2};
use std::time::Instant;

use nalgebra::DMatrix;
use statrs::function::erf::erf;

use nesslsi::constants::{self, EllipticInputs};
use nesslsi::estimators::{self as est, EllipticCoupling, InitialPair, LipBound, MckvConfig};
use nesslsi::metric::{build_metric, build_metric_with, metric_constants, rho_star};
use nesslsi::models::scenarios::{BumpParams, CompetitionParams, KernelKind, KineticQuadraticParams, OuParams};
use nesslsi::models::{derive_elliptic_fields, normalize_kinetic, EllipticModel};
use nesslsi::rng::{Channel, NoiseStream};
use nesslsi::simulate::{FnDiffusion, SimConfig};

/// Criteria that cannot hold as stated; see the README.
const KNOWN_UNATTAINABLE: &[usize] = &[];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Line {
    id: usize,
    pass: bool,
}

fn criterion(id: usize, name: &str, budget_s: f64, f: impl FnOnce() -> Outcome) -> Line {
    let t = Instant::now();
    let o = f();
    let secs = t.elapsed().as_secs_f64();
    let in_budget = secs < budget_s;
    let pass = o.pass && in_budget;
    let budget = if in_budget { String::new() } else { format!(" over budget {budget_s}s") };
    println!("{} criterion {id:>2}: {name}: {} [{secs:.2}s{budget}]", if pass { "PASS" } else { "FAIL" }, o.detail);
    Line { id, pass }
}

fn ou(dim: usize) -> EllipticModel {
    OuParams { dim, ..Default::default() }.build().unwrap()
}

/// `Φ(r) = ∫₀ʳ exp(-θu²/8) du` in closed form.
fn big_phi_exact(theta: f64, r: f64) -> f64 {
    let a = theta / 8.0;
    0.5 * (PI / a).sqrt() * erf(a.sqrt() * r)
}

/// Standard normal CDF.
fn ncdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

fn c1_constants() -> Outcome {
    let k = DMatrix::<f64>::identity(1, 1);
    let p = metric_constants(&k, 0.0, 0.0, 1.0).unwrap();
    let (a, b) = constants::defective_lsi_constants(0.0, 1.0, 0.0, 1.0, 1).unwrap();
    let pc = constants::poincare_constant(0.0, 1.0, 0.0, 1.0, 1, 1.0, 0.0).unwrap();
    let pc2 = constants::poincare_constant(0.0, 2.0, 0.0, 3.0, 2, 1.0, 0.0).unwrap();
    let rep = constants::ConstantsReport::compute(&EllipticInputs {
        l: 0.3,
        rho: 1.2,
        r: 0.7,
        sigma: 1.1,
        d: 2,
        alpha_ext: 1.0,
        sup_inner: Some(0.4),
    })
    .unwrap();
    let b_exact = 6.0 * 5f64.ln() + 3.75;
    let checks = [
        ("kappa2", p.kappa2, 0.125),
        ("A", a, 12.0),
        ("B", b, b_exact),
        ("C(rho=1,sigma=1)", pc.c, 4.0),
        ("C(rho=2,sigma=3)", pc2.c, 6.0),
        ("C_LS", rep.c_ls, rep.a + rep.c * (rep.b + 2.0) / 4.0),
    ];
    let bad: Vec<String> =
        checks.iter().filter(|c| (c.1 - c.2).abs() > 1e-12).map(|c| format!("{}={} vs {}", c.0, c.1, c.2)).collect();
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("A=12, B={b_exact:.12}, kappa2=1/8, C=4sigma/rho, C_LS identity")
        } else {
            bad.join("; ")
        },
    )
}

fn c2_metric() -> Outcome {
    let k = DMatrix::<f64>::identity(1, 1);
    let p = metric_constants(&k, 0.0, 0.0, 1.0).unwrap();
    let tol = 1e-10;
    let t = build_metric(&p, tol).unwrap();
    let theta = p.theta;
    let g_ok = t.g.iter().all(|g| (0.5..=1.0).contains(g));
    let mut upper_ok = true;
    let mut half_phi_ok = true;
    let mut min_gap = f64::INFINITY;
    for (i, &r) in t.grid.iter().enumerate() {
        let phi = big_phi_exact(theta, r);
        let f = t.f[i];
        upper_ok &= f <= phi + tol;
        half_phi_ok &= f >= 0.5 * phi - tol;
        min_gap = min_gap.min(f - 0.5 * r);
    }
    let concave = t.max_second_difference() <= tol;
    let residual = t.residual_max();
    let residual_ok = residual <= 10.0 * tol;
    let phi_r0 = (t.big_phi_at(p.r0) - big_phi_exact(theta, p.r0)).abs();
    let phi_ok = phi_r0 <= 1e-8;
    // Φ ≤ r, so r/2 ≤ f does not follow from Φ/2 ≤ f; both are checked.
    let half_r_ok = min_gap >= -tol;
    outcome(
        g_ok && upper_ok && half_phi_ok && half_r_ok && concave && residual_ok && phi_ok,
        format!(
            "1/2<=g<=1 {g_ok}, f<=Phi {upper_ok}, Phi/2<=f {half_phi_ok}, min(f - r/2) {min_gap:.4} on [0, {:.3}], concave {concave}, residual {residual:.2e}, |Phi(r0)-exact| {phi_r0:.1e}",
            t.r_end
        ),
    )
}

fn c3_c1_bound() -> Outcome {
    let k = DMatrix::<f64>::identity(1, 1);
    let p = metric_constants(&k, 0.0, 0.0, 1.0).unwrap();
    let mut all = String::new();
    let mut pass = true;
    for n in [None, Some(1000)] {
        let t = build_metric_with(&p, 1e-10, n, 2048).unwrap();
        let c1 = t.scalars.c1;
        let mut s = NoiseStream::new(99, 0, Channel::Sampling);
        let (mut inside, mut outside, mut viol) = (0usize, 0usize, 0usize);
        for i in 0..10_000 {
            // scales from 1e-3 to 1e2 so that both sides of r_end are hit
            let scale = 10f64.powf(-3.0 + 5.0 * (i as f64 / 10_000.0));
            let z: Vec<f64> = (0..2).map(|_| scale * s.normal()).collect();
            let zp: Vec<f64> = (0..2).map(|_| scale * s.normal()).collect();
            let r = t.r_distance(&z, &zp);
            if r < t.r_end {
                inside += 1;
            } else {
                outside += 1;
            }
            let d = ((z[0] - zp[0]).powi(2) + (z[1] - zp[1]).powi(2)).sqrt();
            if d > c1 * rho_star(&t, &p, &z, &zp).unwrap() {
                viol += 1;
            }
        }
        pass &= viol == 0 && inside > 0 && outside > 0;
        all.push_str(&format!("n={n:?}: {viol} violations, r<r_end {inside}, r>=r_end {outside}; "));
    }
    outcome(pass, all)
}

fn c4_synchronous() -> Outcome {
    let cfg = SimConfig::new(1e-3, 2.0, 4).unwrap();
    let init = InitialPair::Gaussian { x: vec![1.0], y: vec![-1.0], std: 0.5 };
    let times: Vec<f64> = (0..=8).map(|k| 0.25 * k as f64).collect();
    let r = est::w1_contraction(&ou(1), EllipticCoupling::Synchronous, &init, &times, &cfg, 10_000).unwrap();
    let k = r.fit.kappa_hat;
    outcome((k - 1.0).abs() <= 0.02, format!("kappa_hat = {k:.5}"))
}

/// `P[τ > t]` for the reflected OU difference `dδ = -aδ dt + 2σ dW`.
fn reflection_survival(a: f64, sigma: f64, d0: f64, t: f64) -> f64 {
    let v = 4.0 * sigma * sigma * ((2.0 * a * t).exp() - 1.0) / (2.0 * a);
    erf(d0 / (2.0 * v).sqrt())
}

fn c5_reflection() -> Outcome {
    let times = [0.5, 1.0, 2.0];
    let cfg = SimConfig::new(1e-3, 2.0, 5).unwrap();
    let r = est::coalescence_probability(&ou(1), &[0.5], &[-0.5], &times, &cfg, 100_000).unwrap();
    let mut pass = true;
    let mut detail = String::new();
    for (j, &t) in times.iter().enumerate() {
        let exact = reflection_survival(1.0, SQRT_2, 1.0, t);
        let z = (r.survival[j] - exact).abs() / r.stderr[j];
        pass &= z <= 3.0;
        detail.push_str(&format!("t={t}: {:.4} vs {:.4} (z={z:.2}); ", r.survival[j], exact));
    }
    outcome(pass, detail)
}

fn c6_lyapunov() -> Outcome {
    let cfg = SimConfig::new(5e-3, 1.0, 6).unwrap();
    let r = est::lyapunov_expectation(&ou(1), 0.125, &[0.0], 64, 3000, &cfg).unwrap();
    let e = &r.estimate;
    let bound = 5.0 * (0.625f64).exp();
    let bound_ok = (e.bound.unwrap() - bound).abs() < 1e-12;
    let pass = e.within(SQRT_2) && e.value <= bound && bound_ok;
    outcome(pass, format!("{:.4} ± {:.4} vs sqrt2, bound {:.4}", e.value, e.stderr, bound))
}

fn c7_harnack() -> Outcome {
    // closed forms for f = e^x under OU with σ = √2: X_t ~ N(x e^{-t}, 1 - e^{-2t})
    let mut grid_ok = true;
    for t in [0.5f64, 1.0, 2.0] {
        let s2 = 1.0 - (-2.0 * t).exp();
        for d in [0.5, 1.0, 2.0] {
            for alpha in [2.0, 4.0] {
                let lhs = alpha * (d * (-t).exp() + s2 / 2.0);
                let rhs_base = alpha * alpha * s2 / 2.0;
                let factor = constants::harnack_factor(0.0, SQRT_2, alpha, t, d).unwrap();
                grid_ok &= lhs <= rhs_base + factor.ln();
            }
        }
    }
    let m = ou(1);
    let cfg = SimConfig::new(1e-4, 1.0, 7).unwrap();
    let cap = 3f64.exp();
    let f = move |x: &[f64]| x[0].exp().min(cap);
    let r = est::girsanov_check(&m, &f, &[0.0], &[1.0], 0.0, &cfg, 10_000).unwrap();
    // E[min(e^Z, e³)], Z ~ N(μ, s²)
    let (mu, s) = ((-1.0f64).exp(), (1.0 - (-2.0f64).exp()).sqrt());
    let exact = (mu + s * s / 2.0).exp() * ncdf((3.0 - mu - s * s) / s) + cap * (1.0 - ncdf((3.0 - mu) / s));
    let mc_ok = r.weighted.within(exact);
    let merged = r.merge_fraction == 1.0;
    let w_ok = r.weight_mean.within(1.0);
    outcome(
        grid_ok && mc_ok && merged && w_ok,
        format!(
            "18-point closed-form grid {grid_ok}; E[R f(Y_T)] = {:.4} ± {:.4} vs {exact:.4}; merged {:.3}; E[R] = {:.4} ± {:.4}",
            r.weighted.value, r.weighted.stderr, r.merge_fraction, r.weight_mean.value, r.weight_mean.stderr
        ),
    )
}

fn c8_kinetic() -> Outcome {
    let model = KineticQuadraticParams::default().build().unwrap();
    let norm = normalize_kinetic(&model).unwrap();
    let l = norm.lipschitz;
    let p = metric_constants(&norm.stiffness, l.l1, l.l2, l.r).unwrap();
    let table = build_metric_with(&p, 1e-8, Some(1000), 1024).unwrap();
    let mut cfg = SimConfig::new(1e-3, 10.0, 8).unwrap();
    cfg.n_smooth = Some(1000);
    let init = InitialPair::Gaussian { x: vec![1.0, 0.0], y: vec![-1.0, 0.0], std: 0.5 };
    let times: Vec<f64> = (0..=10).map(|k| k as f64).collect();
    let r = est::kinetic_coupling_check(&norm, &table, &init, &times, &cfg, 10_000, 0.10).unwrap();
    let worst = r.w1.mean.iter().zip(r.w1.envelope.as_ref().unwrap()).map(|(m, e)| m / e).fold(0.0, f64::max);
    outcome(
        r.pass,
        format!(
            "max mean/envelope {worst:.3}, C1={:.3}, kappa={:.3e}, max marginal z {:.2}",
            r.c1, r.kappa, r.marginals.max_z
        ),
    )
}

/// Crank–Nicolson for `∂ₜh = h'' + b(x)h' + φ(x)h`, `h(0) = 1`, `h = 0` at `±L`.
fn cn_oracle(b: impl Fn(f64) -> f64, phi: impl Fn(f64) -> f64, l: f64, nx: usize, t: f64, nt: usize, x: f64) -> f64 {
    let dx = 2.0 * l / nx as f64;
    let dt = t / nt as f64;
    let xs: Vec<f64> = (0..=nx).map(|i| -l + i as f64 * dx).collect();
    let m = nx - 1;
    // operator row i: lo·h[i-1] + di·h[i] + up·h[i+1]
    let (mut lo, mut di, mut up) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for k in 0..m {
        let xi = xs[k + 1];
        lo[k] = 1.0 / (dx * dx) - b(xi) / (2.0 * dx);
        di[k] = -2.0 / (dx * dx) + phi(xi);
        up[k] = 1.0 / (dx * dx) + b(xi) / (2.0 * dx);
    }
    let mut h = vec![1.0; m];
    let (mut cp, mut dp, mut rhs) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for _ in 0..nt {
        for k in 0..m {
            let hl = if k > 0 { h[k - 1] } else { 0.0 };
            let hr = if k + 1 < m { h[k + 1] } else { 0.0 };
            rhs[k] = h[k] + 0.5 * dt * (lo[k] * hl + di[k] * h[k] + up[k] * hr);
        }
        // Thomas algorithm on (I - dt/2 A)
        for k in 0..m {
            let a = -0.5 * dt * lo[k];
            let bb = 1.0 - 0.5 * dt * di[k];
            let c = -0.5 * dt * up[k];
            let denom = if k == 0 { bb } else { bb - a * cp[k - 1] };
            cp[k] = c / denom;
            dp[k] = if k == 0 { rhs[k] / denom } else { (rhs[k] - a * dp[k - 1]) / denom };
        }
        for k in (0..m).rev() {
            h[k] = if k + 1 < m { dp[k] - cp[k] * h[k + 1] } else { dp[k] };
        }
    }
    let pos = (x + l) / dx;
    let i = pos.floor() as usize;
    let w = pos - i as f64;
    let at = |j: usize| if j == 0 || j == nx { 0.0 } else { h[j - 1] };
    (1.0 - w) * at(i) + w * at(i + 1)
}

/// `h = exp(a x² + c)` with `a' = 4a² - 2κa + ε`, `c' = 2a + ε`.
fn riccati_oracle(kappa: f64, eps: f64, t: f64, x: f64) -> f64 {
    let n = 200_000;
    let h = t / n as f64;
    let (mut a, mut c) = (0.0f64, 0.0f64);
    let fa = |a: f64| 4.0 * a * a - 2.0 * kappa * a + eps;
    for _ in 0..n {
        let (k1a, k1c) = (fa(a), 2.0 * a + eps);
        let a2 = a + 0.5 * h * k1a;
        let (k2a, k2c) = (fa(a2), 2.0 * a2 + eps);
        let a3 = a + 0.5 * h * k2a;
        let (k3a, k3c) = (fa(a3), 2.0 * a3 + eps);
        let a4 = a + h * k3a;
        let (k4a, k4c) = (fa(a4), 2.0 * a4 + eps);
        a += h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a);
        c += h / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c);
    }
    (a * x * x + c).exp()
}

fn c9_feynman_kac() -> Outcome {
    let m = ou(1);
    let cfg = SimConfig::new(1e-2, 2.0, 9).unwrap();
    let c = 0.37;
    let konst = move |_: &[f64]| c;
    let r = est::feynman_kac_h(&m, &konst, &[0.3], &cfg, 1000).unwrap();
    let const_ok = (r.estimate.value / (c * 2.0).exp() - 1.0).abs() < 1e-12 && r.estimate.stderr == 0.0;

    let eps = 0.1;
    let process = FnDiffusion {
        state_dim: 1,
        noise_dim: 1,
        noise_offset: 0,
        noise_scale: SQRT_2,
        drift: move |x: &[f64], o: &mut [f64]| o[0] = -(1.0 - eps) * x[0],
    };
    let phi = move |x: &[f64]| eps * (1.0 + x[0] * x[0]);
    let x0 = 0.5;
    let cfg = SimConfig::new(1e-3, 2.0, 19).unwrap();
    let h = est::feynman_kac_h(&process, &phi, &[x0], &cfg, 100_000).unwrap().estimate;
    let oracle = cn_oracle(|x| -(1.0 - eps) * x, |x| eps * (1.0 + x * x), 14.0, 2800, 2.0, 2000, x0);
    let ric = riccati_oracle(1.0 - eps, eps, 2.0, x0);
    let oracles_agree = (oracle / ric - 1.0).abs() < 1e-3;
    let rel = (h.value / oracle - 1.0).abs();
    outcome(
        const_ok && oracles_agree && rel < 0.02,
        format!(
            "phi=c exact {const_ok}; h = {:.5} ± {:.5} vs CN {oracle:.5} (Riccati {ric:.5}), rel err {rel:.4}",
            h.value, h.stderr
        ),
    )
}

fn c10_u_scan() -> Outcome {
    let bumped =
        OuParams { bump: Some(BumpParams { amplitude: 0.6, width: 1.5 }), ..Default::default() }.build().unwrap();
    let fit_cfg = SimConfig::new(1e-2, 3.0, 100).unwrap();
    let times: Vec<f64> = (1..=12).map(|k| 0.25 * k as f64).collect();
    let fc = est::fit_reflection_constants(&bumped, &[0.5], &[-0.5], &times, &fit_cfg, 2000).unwrap();
    let fields = derive_elliptic_fields(&bumped, 1e-4).unwrap();
    let pot = fields.potential.clone();
    let phi = move |x: &[f64]| pot(x);
    let grid: Vec<Vec<f64>> = (0..9).map(|i| vec![-2.0 + 0.5 * i as f64]).collect();
    let cfg = SimConfig::new(5e-3, 2.0, 10).unwrap();
    let bound = LipBound::Elliptic { m_phi: bumped.m_phi, l_phi: bumped.l_phi, c_prime: fc.c_prime };
    let scan = est::u_lipschitz_scan(&est::elliptic_fk_process(&fields), &phi, &grid, &cfg, 4000, bound).unwrap();

    let plain = ou(1);
    let pf = derive_elliptic_fields(&plain, 1e-4).unwrap();
    let p0 = pf.potential.clone();
    let phi0 = move |x: &[f64]| p0(x);
    let zero = est::u_lipschitz_scan(
        &est::elliptic_fk_process(&pf),
        &phi0,
        &grid,
        &cfg,
        200,
        LipBound::Elliptic { m_phi: 0.0, l_phi: 0.0, c_prime: 1.0 },
    )
    .unwrap();
    let zero_ok = zero.points.iter().all(|p| p.u.abs() <= 3.0 * p.u_se + 1e-12);
    let w = scan.worst.as_ref().unwrap();
    outcome(
        scan.pass && zero_ok,
        format!(
            "fitted C'={:.3} (kappa={:.3}, C={:.3}); worst pair margin {:.4} (|du|={:.4}, bound {:.4}); phi=0 gives u=0 {zero_ok}",
            fc.c_prime, fc.kappa, fc.c, w.margin, w.diff, w.bound
        ),
    )
}

fn nelson_ratio(c: f64, alpha: f64, beta: f64, t: f64) -> f64 {
    let e = (-2.0 * t).exp();
    (c * c / 2.0 * ((1.0 - e) + beta * e - alpha)).exp()
}

fn c11_hyper() -> Outcome {
    let m = ou(1);
    let cfg = SimConfig::new(5e-3, 1.0, 11).unwrap();
    let c = 0.5;
    let f = move |x: &[f64]| (c * x[0]).exp();
    let short = est::hypercontractivity_probe(&m, &f, 2.0, 3.0, 0.5, 400, 1000, &[0.0], &cfg).unwrap();
    let exact_short = nelson_ratio(c, 2.0, 3.0, 0.5);
    let t0 = constants::hyper_t0(1.0, SQRT_2, 2.0, 3.0);
    let long = est::hypercontractivity_probe(&m, &f, 2.0, 3.0, 2.0 * t0, 200, 1000, &[0.0], &cfg).unwrap();
    let exact_long = nelson_ratio(c, 2.0, 3.0, 2.0 * t0);
    let pass = short.estimate.within(exact_short)
        && long.estimate.within(exact_long)
        && long.estimate.pass == Some(true)
        && (t0 - 3.0).abs() < 1e-12;
    outcome(
        pass,
        format!(
            "t=0.5: {:.4} ± {:.4} vs {exact_short:.4}; t=2t0={:.3}: {:.4} ± {:.4} vs {exact_long:.4}, bound {:.3}",
            short.estimate.value,
            short.estimate.stderr,
            2.0 * t0,
            long.estimate.value,
            long.estimate.stderr,
            long.estimate.bound.unwrap()
        ),
    )
}

fn c12_mckv() -> Outcome {
    let decoupled = CompetitionParams { lambda: 0.0, ..Default::default() }.build().unwrap();
    let cfg =
        MckvConfig { n_particles: 256, n_iters: 4, t_iter: 3.0, dt: 1e-2, seed: 12, w2_subsample: 256, w2_draws: 8 };
    let r0 = est::mckv_fixed_point(&decoupled, &cfg).unwrap();
    let coupled = CompetitionParams { kernel: KernelKind::Arctan, lambda: 0.05, ..Default::default() }.build().unwrap();
    let r1 = est::mckv_fixed_point(&coupled, &cfg).unwrap();
    // independent evaluation of the decay-condition ratio on the final particles
    let ps = &r1.particles;
    let mean_abs = ps.iter().map(|y| (y[0] * y[0] + y[1] * y[1]).sqrt()).sum::<f64>() / ps.len() as f64;
    let mut worst = 0.0_f64;
    for x in ps {
        let (mut b0, mut b1) = (0.0, 0.0);
        for y in ps {
            b0 += 1.0 / (1.0 + (x[0] - y[1]).powi(2));
            b1 += 1.0 / (1.0 + (y[0] - x[1]).powi(2));
        }
        let n = ps.len() as f64;
        let b = ((b0 / n).powi(2) + (b1 / n).powi(2)).sqrt();
        worst = worst.max(b * (1.0 + (x[0] * x[0] + x[1] * x[1]).sqrt()) / (1.0 + mean_abs));
    }
    let agree = (worst - r1.decay_condition.max_ratio).abs() < 1e-9;
    let pass = r0.at_sampling_scale && r1.decay_condition.pass && agree;
    outcome(
        pass,
        format!(
            "lambda=0 W2 {:?} vs 3N^-1/4 = {:.3}; decay condition max ratio {:.3} <= C'={} (direct {:.3}); lambda=0.05 W2 {:?}",
            r0.distances.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>(),
            3.0 * r0.sampling_scale,
            r1.decay_condition.max_ratio,
            r1.decay_condition.c_prime,
            worst,
            r1.distances.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn main() {
    let lines = vec![
        criterion(1, "constants exactness", 1.0, c1_constants),
        criterion(2, "metric construction", 1.0, c2_metric),
        criterion(3, "|z - z'| <= C1 rho_*", 1.0, c3_c1_bound),
        criterion(4, "OU synchronous rate", 30.0, c4_synchronous),
        criterion(5, "OU reflection survival", 120.0, c5_reflection),
        criterion(6, "Lyapunov expectation", 60.0, c6_lyapunov),
        criterion(7, "Harnack and Girsanov", 120.0, c7_harnack),
        criterion(8, "kinetic coupling envelope", 300.0, c8_kinetic),
        criterion(9, "Feynman-Kac", 120.0, c9_feynman_kac),
        criterion(10, "u_T Lipschitz scan", 300.0, c10_u_scan),
        criterion(11, "hypercontractivity probe", 180.0, c11_hyper),
        criterion(12, "McKean-Vlasov", 180.0, c12_mckv),
    ];
    let unexpected: Vec<usize> =
        lines.iter().filter(|l| !l.pass && !KNOWN_UNATTAINABLE.contains(&l.id)).map(|l| l.id).collect();
    if !unexpected.is_empty() {
        eprintln!("failing criteria: {unexpected:?}");
        std::process::exit(1);
    }
}
