//! Isotropic Gaussian-mixture data model.
//!
//! Under the variance-preserving forward process a mixture with component
//! means `mu_k` and shared variance `sigma0^2` stays a mixture: at noise level
//! `abar` the components sit at `sqrt(abar) * mu_k` with variance
//! `1 - abar * (1 - sigma0^2)`. Everything the sampler needs from a trained
//! network (score, posterior mean) has a closed form here.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::schedule::DiffusionSchedule;
use crate::stats::{log_sum_exp, softmax};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    means: Vec<Vec<f64>>,
    sigma0_sq: f64,
    weights: Vec<f64>,
    #[serde(skip)]
    log_weights: Vec<f64>,
}

/// Forward marginal `q_t` at one noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardMarginal {
    pub alpha_bar: f64,
    pub component_means: Vec<Vec<f64>>,
    /// Shared isotropic variance `sigma_t^2`.
    pub var: f64,
}

/// `p(x_0 | x_t)`: a mixture with responsibilities `r_k`, means `m_k` and a
/// shared isotropic variance.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingPosterior {
    pub responsibilities: Vec<f64>,
    pub component_means: Vec<Vec<f64>>,
    pub component_var: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl GmmModel {
    /// Mixture with explicit means. `weights = None` means uniform.
    pub fn new(means: Vec<Vec<f64>>, sigma0_sq: f64, weights: Option<Vec<f64>>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::config("model.means", "need at least one component"));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::config("model.means", "dimension must be at least 1"));
        }
        if let Some(bad) = means.iter().position(|m| m.len() != d) {
            return Err(Error::config(
                format!("model.means[{bad}]"),
                format!("expected dimension {d}, found {}", means[bad].len()),
            ));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("model.means", "means must be finite"));
        }
        if !(sigma0_sq > 0.0 && sigma0_sq.is_finite()) {
            return Err(Error::config("model.sigma0_sq", format!("must be positive, got {sigma0_sq}")));
        }
        let k = means.len();
        let weights = match weights {
            None => vec![1.0 / k as f64; k],
            Some(w) => {
                if w.len() != k {
                    return Err(Error::config(
                        "model.weights",
                        format!("expected {k} weights, found {}", w.len()),
                    ));
                }
                if w.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::config("model.weights", "weights must be positive"));
                }
                let total: f64 = w.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::config(
                        "model.weights",
                        format!("weights must sum to 1, sum is {total}"),
                    ));
                }
                w
            }
        };
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            means,
            sigma0_sq,
            weights,
            log_weights,
        })
    }

    /// `K` components equally spaced on a circle of the given radius in 2-d.
    /// Component 0 sits on the positive x axis.
    pub fn ring(components: usize, radius: f64, sigma0_sq: f64) -> Result<Self> {
        if components < 1 {
            return Err(Error::config("model.K", "need at least one component"));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::config("model.R", "must be positive"));
        }
        let means = (0..components)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / components as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(means, sigma0_sq, None)
    }

    /// Two equally weighted components at `mu` and `-mu`.
    pub fn symmetric(mu: Vec<f64>, sigma0_sq: f64) -> Result<Self> {
        let neg = mu.iter().map(|v| -v).collect();
        Self::new(vec![mu, neg], sigma0_sq, None)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sigma0_sq(&self) -> f64 {
        self.sigma0_sq
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn log_weight(&self, k: usize) -> f64 {
        // serde(skip) leaves the cache empty after deserialization.
        self.log_weights.get(k).copied().unwrap_or_else(|| self.weights[k].ln())
    }

    /// Shared component variance of the forward marginal.
    pub fn marginal_var(&self, alpha_bar: f64) -> f64 {
        1.0 - alpha_bar * (1.0 - self.sigma0_sq)
    }

    pub fn forward_marginal(&self, alpha_bar: f64) -> ForwardMarginal {
        let s = alpha_bar.sqrt();
        ForwardMarginal {
            alpha_bar,
            component_means: self.means.iter().map(|m| m.iter().map(|v| s * v).collect()).collect(),
            var: self.marginal_var(alpha_bar),
        }
    }

    /// Unnormalized log responsibilities `log w_k + log N(x; mu_kt, var)` minus
    /// the shared normalizer.
    fn component_logits(&self, alpha_bar: f64, x: &[f64]) -> Vec<f64> {
        let s = alpha_bar.sqrt();
        let var = self.marginal_var(alpha_bar);
        self.means
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let d2: f64 = x.iter().zip(m).map(|(xi, mi)| (xi - s * mi).powi(2)).sum();
                self.log_weight(k) - d2 / (2.0 * var)
            })
            .collect()
    }

    /// `log q_t(x)` for the forward marginal at noise level `alpha_bar`.
    pub fn log_density(&self, alpha_bar: f64, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let var = self.marginal_var(alpha_bar);
        let norm = -0.5 * self.dim() as f64 * (2.0 * std::f64::consts::PI * var).ln();
        Ok(log_sum_exp(&self.component_logits(alpha_bar, x)) + norm)
    }

    /// Posterior class probabilities `Pr(y = k | x_t)` for all k.
    pub fn responsibilities(&self, alpha_bar: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(softmax(&self.component_logits(alpha_bar, x)))
    }

    pub fn membership_prob(&self, alpha_bar: f64, x: &[f64], k: usize) -> Result<f64> {
        if k >= self.components() {
            return Err(Error::Index {
                index: k,
                len: self.components(),
            });
        }
        Ok(self.responsibilities(alpha_bar, x)?[k])
    }

    /// `grad_x log q_t(x) = sum_k r_k (mu_kt - x) / sigma_t^2`.
    pub fn score(&self, alpha_bar: f64, x: &[f64]) -> Result<Vec<f64>> {
        let r = self.responsibilities(alpha_bar, x)?;
        let s = alpha_bar.sqrt();
        let var = self.marginal_var(alpha_bar);
        let mut out = vec![0.0; x.len()];
        for (rk, m) in r.iter().zip(&self.means) {
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(m) {
                *o += rk * (s * mi - xi);
            }
        }
        out.iter_mut().for_each(|o| *o /= var);
        Ok(out)
    }

    fn posterior_precision(&self, alpha_bar: f64) -> Result<f64> {
        if !(alpha_bar < 1.0) {
            return Err(Error::Contract(
                "denoising posterior is degenerate at t = 0".into(),
            ));
        }
        Ok(alpha_bar / (1.0 - alpha_bar) + 1.0 / self.sigma0_sq)
    }

    pub fn denoising_posterior(&self, alpha_bar: f64, x_t: &[f64]) -> Result<DenoisingPosterior> {
        let lambda = self.posterior_precision(alpha_bar)?;
        let r = self.responsibilities(alpha_bar, x_t)?;
        let coef = alpha_bar.sqrt() / (1.0 - alpha_bar);
        let component_means = self
            .means
            .iter()
            .map(|m| {
                x_t.iter()
                    .zip(m)
                    .map(|(x, mu)| (coef * x + mu / self.sigma0_sq) / lambda)
                    .collect()
            })
            .collect();
        Ok(DenoisingPosterior {
            responsibilities: r,
            component_means,
            component_var: 1.0 / lambda,
        })
    }

    /// `E[x_0 | x_t]`.
    pub fn posterior_mean(&self, alpha_bar: f64, x_t: &[f64]) -> Result<Vec<f64>> {
        Ok(self.denoising_posterior(alpha_bar, x_t)?.mean())
    }

    /// `J^T g` where `J` is the Jacobian of the posterior mean in `x_t`.
    ///
    /// `J = (1/lambda) [ c I + sqrt(abar) / (sigma0^2 sigma_t^2) Cov_r(mu) ]`
    /// with `c = sqrt(abar) / (1 - abar)` and `Cov_r(mu)` the covariance of the
    /// component means under the responsibilities. `J` is symmetric.
    pub fn posterior_mean_vjp(&self, alpha_bar: f64, x_t: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), g.len())?;
        let lambda = self.posterior_precision(alpha_bar)?;
        let r = self.responsibilities(alpha_bar, x_t)?;
        let d = self.dim();
        let mut mean_mu = vec![0.0; d];
        for (rk, m) in r.iter().zip(&self.means) {
            for (a, mi) in mean_mu.iter_mut().zip(m) {
                *a += rk * mi;
            }
        }
        let sqrt_ab = alpha_bar.sqrt();
        let c = sqrt_ab / (1.0 - alpha_bar);
        let cov_coef = sqrt_ab / (self.sigma0_sq * self.marginal_var(alpha_bar));
        let mut out: Vec<f64> = g.iter().map(|gi| c * gi).collect();
        for (rk, m) in r.iter().zip(&self.means) {
            let proj: f64 = m.iter().zip(&mean_mu).zip(g).map(|((mi, ai), gi)| (mi - ai) * gi).sum();
            for ((o, mi), ai) in out.iter_mut().zip(m).zip(&mean_mu) {
                *o += cov_coef * rk * (mi - ai) * proj;
            }
        }
        out.iter_mut().for_each(|o| *o /= lambda);
        Ok(out)
    }

    /// `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) noise`.
    pub fn forward_sample(
        &self,
        schedule: &DiffusionSchedule,
        t: usize,
        x0: &[f64],
        noise: &[f64],
    ) -> Result<Vec<f64>> {
        check_dim(self.dim(), x0.len())?;
        check_dim(self.dim(), noise.len())?;
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
    }

    /// Draws `x_0` from the mixture, returning the component index too.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let sd = self.sigma0_sq.sqrt();
        let x = self.means[k]
            .iter()
            .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (k, x)
    }

    /// Draws `x_t` from the forward marginal at `alpha_bar`.
    pub fn sample_marginal<R: Rng + ?Sized>(&self, alpha_bar: f64, rng: &mut R) -> Vec<f64> {
        let (_, x0) = self.sample_prior(rng);
        let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
        x0.iter().map(|x| a * x + b * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    /// Prior probability of the axis-aligned box `[lower, upper]`.
    pub fn box_mass(&self, lower: &[f64], upper: &[f64]) -> Result<f64> {
        check_dim(self.dim(), lower.len())?;
        check_dim(self.dim(), upper.len())?;
        let sd = self.sigma0_sq.sqrt();
        let phi = |z: f64| 0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2);
        Ok(self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                w * m
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(mi, (lo, hi))| phi((hi - mi) / sd) - phi((lo - mi) / sd))
                    .product::<f64>()
            })
            .sum())
    }
}

impl DenoisingPosterior {
    pub fn mean(&self) -> Vec<f64> {
        let d = self.component_means[0].len();
        let mut out = vec![0.0; d];
        for (r, m) in self.responsibilities.iter().zip(&self.component_means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += r * v;
            }
        }
        out
    }

    pub fn log_density(&self, x0: &[f64]) -> f64 {
        let d = x0.len() as f64;
        let v = self.component_var;
        let norm = -0.5 * d * (2.0 * std::f64::consts::PI * v).ln();
        let terms: Vec<f64> = self
            .responsibilities
            .iter()
            .zip(&self.component_means)
            .map(|(r, m)| r.ln() - sq_dist(x0, m) / (2.0 * v))
            .collect();
        log_sum_exp(&terms) + norm
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.responsibilities.len() - 1;
        for (i, r) in self.responsibilities.iter().enumerate() {
            acc += r;
            if u < acc {
                k = i;
                break;
            }
        }
        let sd = self.component_var.sqrt();
        self.component_means[k]
            .iter()
            .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_sample_deterministic_branches() {
        let s = make_linear_schedule(2, 0.75, 0.75).unwrap();
        let m = GmmModel::symmetric(vec![1.0, 0.0], 1.0).unwrap();
        // abar_1 = 0.25
        let xt = m.forward_sample(&s, 1, &[2.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((xt[0] - 1.0).abs() < 1e-15 && xt[1] == 0.0);
        let same = m.forward_sample(&s, 0, &[2.0, 3.0], &[5.0, -5.0]).unwrap();
        assert_eq!(same, vec![2.0, 3.0]);
        assert!(matches!(
            m.forward_sample(&s, 1, &[1.0], &[0.0, 0.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn forward_sample_moments() {
        let s = make_linear_schedule(100, 1e-4, 0.2).unwrap();
        let m = GmmModel::symmetric(vec![1.0, 0.0], 1.0).unwrap();
        let t = 20;
        let ab = s.alpha_bar(t);
        let x0 = [2.0, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let e: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let x = m.forward_sample(&s, t, &x0, &e).unwrap();
            for i in 0..2 {
                sum[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let want_var = 1.0 - ab;
            assert!((mean - ab.sqrt() * x0[i]).abs() < 3.0 * (want_var / n as f64).sqrt() + 1e-3);
            // var of the sample variance for a gaussian is 2 var^2 / n
            assert!((var - want_var).abs() < 4.0 * want_var * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn standard_normal_score() {
        let m = GmmModel::new(vec![vec![0.0, 0.0]], 1.0, None).unwrap();
        for ab in [0.0, 0.3, 1.0] {
            let x = [0.7, -1.2];
            assert_eq!(m.marginal_var(ab), 1.0);
            let sc = m.score(ab, &x).unwrap();
            assert!((sc[0] + 0.7).abs() < 1e-15 && (sc[1] - 1.2).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_score_vanishes_at_origin() {
        let m = GmmModel::symmetric(vec![2.0, 1.0], 0.5).unwrap();
        let sc = m.score(0.4, &[0.0, 0.0]).unwrap();
        assert!(sc.iter().all(|v| v.abs() < 1e-15));
        assert!((m.membership_prob(0.4, &[0.0, 0.0], 0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn membership_logistic_form() {
        let m = GmmModel::symmetric(vec![1.0, 0.0], 1.0).unwrap();
        let ab: f64 = 0.36;
        let var = m.marginal_var(ab);
        // choose x so that 2 sqrt(ab) x.mu / var = 1
        let x = [var / (2.0 * ab.sqrt()), 0.3];
        let p = m.membership_prob(ab, &x, 0).unwrap();
        assert!((p - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(matches!(m.membership_prob(ab, &x, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn ring_membership_is_sharp_near_a_mean() {
        let s = make_linear_schedule(100, 1e-4, 0.2).unwrap();
        let m = GmmModel::ring(8, 8.0, 1.0).unwrap();
        let ab = s.alpha_bar(5);
        let x: Vec<f64> = m.means()[3].iter().map(|v| v * ab.sqrt()).collect();
        assert!(m.membership_prob(ab, &x, 3).unwrap() > 0.99);
    }

    #[test]
    fn posterior_no_information_limit() {
        let m = GmmModel::new(vec![vec![1.0, 2.0], vec![-3.0, 0.5]], 0.7, Some(vec![0.3, 0.7])).unwrap();
        let post = m.denoising_posterior(1e-14, &[0.4, -0.2]).unwrap();
        for k in 0..2 {
            assert!((post.responsibilities[k] - m.weights()[k]).abs() < 1e-6);
            for i in 0..2 {
                assert!((post.component_means[k][i] - m.means()[k][i]).abs() < 1e-6);
            }
        }
        assert!((post.component_var - 0.7).abs() < 1e-12);
        assert!(m.denoising_posterior(1.0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn single_component_posterior_mean() {
        let m = GmmModel::new(vec![vec![0.0, 0.0]], 1.0, None).unwrap();
        // lambda = 0.5/0.5 + 1 = 2, m = sqrt(.5) x / 0.5 / 2
        let mean = m.posterior_mean(0.5, &[1.0, 0.0]).unwrap();
        assert!((mean[0] - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean[1], 0.0);
    }

    #[test]
    fn box_mass_of_whole_space_is_one() {
        let m = GmmModel::ring(8, 8.0, 1.0).unwrap();
        let mass = m.box_mass(&[-100.0, -100.0], &[100.0, 100.0]).unwrap();
        assert!((mass - 1.0).abs() < 1e-12);
    }
}
