//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use smc_guide::config::RunConfig;
use smc_guide::GmmModel;

pub fn config(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::parse_and_validate(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn log_normal_iso(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d2: f64 = x.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
    -0.5 * x.len() as f64 * (2.0 * PI * var).ln() - d2 / (2.0 * var)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log q(x_t | x_0) + log p_0(x_0)` written from the two Gaussian factors.
pub fn log_joint(model: &GmmModel, alpha_bar: f64, x_t: &[f64], x0: &[f64]) -> f64 {
    let scaled: Vec<f64> = x0.iter().map(|v| alpha_bar.sqrt() * v).collect();
    let lik = log_normal_iso(x_t, &scaled, 1.0 - alpha_bar);
    let terms: Vec<f64> = model
        .means()
        .iter()
        .zip(model.weights())
        .map(|(m, w)| w.ln() + log_normal_iso(x0, m, model.sigma0_sq()))
        .collect();
    lik + log_sum_exp(&terms)
}

/// Log normalizer of `x_0 -> q(x_t | x_0) p_0(x_0)` in two dimensions by the
/// trapezoid rule on an `n x n` grid covering the likelihood factor's bulk.
pub fn log_evidence_2d(model: &GmmModel, alpha_bar: f64, x_t: &[f64], n: usize) -> f64 {
    let s = alpha_bar.sqrt();
    let half = 12.0 * ((1.0 - alpha_bar) / alpha_bar).sqrt();
    let reach = 12.0 * model.sigma0_sq().sqrt();
    let (mut lo, mut hi) = (vec![0.0; 2], vec![0.0; 2]);
    for d in 0..2 {
        let pmin = model.means().iter().map(|m| m[d]).fold(f64::INFINITY, f64::min) - reach;
        let pmax = model.means().iter().map(|m| m[d]).fold(f64::NEG_INFINITY, f64::max) + reach;
        let c = x_t[d] / s;
        lo[d] = (c - half).max(pmin);
        hi[d] = (c + half).min(pmax);
        if lo[d] >= hi[d] {
            lo[d] = c - half;
            hi[d] = c + half;
        }
    }
    let hx = (hi[0] - lo[0]) / (n - 1) as f64;
    let hy = (hi[1] - lo[1]) / (n - 1) as f64;
    let mut logs = Vec::with_capacity(n * n);
    for i in 0..n {
        let wx: f64 = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        for j in 0..n {
            let wy = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            let p = [lo[0] + i as f64 * hx, lo[1] + j as f64 * hy];
            logs.push((wx * wy).ln() + log_joint(model, alpha_bar, x_t, &p));
        }
    }
    log_sum_exp(&logs) + (hx * hy).ln()
}

/// Largest absolute gap between the analytic denoising posterior density and
/// the quadrature-normalized joint, over the posterior mean and `probes`
/// draws from the analytic posterior.
pub fn posterior_gap<R: Rng>(model: &GmmModel, alpha_bar: f64, x_t: &[f64], probes: usize, rng: &mut R) -> f64 {
    let post = model.denoising_posterior(alpha_bar, x_t).unwrap();
    let log_z = log_evidence_2d(model, alpha_bar, x_t, 801);
    let mut points = vec![post.mean()];
    points.extend((0..probes).map(|_| post.sample(rng)));
    points
        .iter()
        .map(|p| {
            let oracle = (log_joint(model, alpha_bar, x_t, p) - log_z).exp();
            (post.log_density(p).exp() - oracle).abs()
        })
        .fold(0.0, f64::max)
}

/// Max over coordinates of `|fd - score| / max(|score|, 1)` with central
/// differences of the analytic log density.
pub fn score_fd_gap(model: &GmmModel, alpha_bar: f64, x: &[f64]) -> f64 {
    let s = model.score(alpha_bar, x).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        let mut up = x.to_vec();
        let mut dn = x.to_vec();
        up[i] += h;
        dn[i] -= h;
        let fd = (model.log_density(alpha_bar, &up).unwrap() - model.log_density(alpha_bar, &dn).unwrap()) / (2.0 * h);
        worst = worst.max((fd - s[i]).abs() / s[i].abs().max(1.0));
    }
    worst
}

/// Max gap between the component-wise posterior mean and Tweedie's formula.
pub fn tweedie_gap(model: &GmmModel, alpha_bar: f64, x: &[f64]) -> f64 {
    let s = model.score(alpha_bar, x).unwrap();
    let mean = model.denoising_posterior(alpha_bar, x).unwrap().mean();
    x.iter()
        .zip(&s)
        .zip(&mean)
        .map(|((xi, si), mi)| ((xi + (1.0 - alpha_bar) * si) / alpha_bar.sqrt() - mi).abs())
        .fold(0.0, f64::max)
}

/// A `(alpha_bar, x_t)` pair with `x_t` drawn from the forward marginal.
pub fn random_state<R: Rng>(model: &GmmModel, alpha_bars: &[f64], rng: &mut R) -> (usize, f64, Vec<f64>) {
    let t = rng.random_range(1..alpha_bars.len());
    let ab = alpha_bars[t];
    (t, ab, model.sample_marginal(ab, rng))
}

pub fn standard_normal<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}
