//! Conditioning functions `p(y | x_0)`, evaluated in log space.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gmm::GmmModel;
use crate::stats::log_sum_exp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    /// Axis-aligned box `[lower, upper]`.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl Region {
    pub fn dim(&self) -> usize {
        match self {
            Region::Box { lower, .. } => lower.len(),
            Region::Ball { center, .. } => center.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Region::Box { lower, upper } => {
                check_dim(lower.len(), upper.len())?;
                if lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
                    return Err(Error::config("likelihood.region", "box needs lower < upper"));
                }
            }
            Region::Ball { radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(Error::config("likelihood.region.radius", "must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u),
            Region::Ball { center, radius } => {
                let d2: f64 = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
                d2 <= radius * radius
            }
        }
    }

    /// Signed Euclidean distance to the boundary, negative inside.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        match self {
            Region::Box { lower, upper } => {
                let q: Vec<f64> = x
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(v, (l, u))| (v - 0.5 * (l + u)).abs() - 0.5 * (u - l))
                    .collect();
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = q.iter().copied().fold(f64::NEG_INFINITY, f64::max).min(0.0);
                outside + inside
            }
            Region::Ball { center, radius } => {
                let d2: f64 = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
                d2.sqrt() - radius
            }
        }
    }

    pub fn signed_distance_grad(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Region::Box { lower, upper } => {
                let offs: Vec<f64> = x.iter().zip(lower.iter().zip(upper)).map(|(v, (l, u))| v - 0.5 * (l + u)).collect();
                let q: Vec<f64> = offs
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(o, (l, u))| o.abs() - 0.5 * (u - l))
                    .collect();
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                if outside > 0.0 {
                    q.iter()
                        .zip(&offs)
                        .map(|(qi, o)| qi.max(0.0) * o.signum() / outside)
                        .collect()
                } else {
                    let j = q
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(j, _)| j)
                        .unwrap_or(0);
                    (0..x.len()).map(|i| if i == j { offs[i].signum() } else { 0.0 }).collect()
                }
            }
            Region::Ball { center, .. } => {
                let diff: Vec<f64> = x.iter().zip(center).map(|(a, b)| a - b).collect();
                let n = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    vec![0.0; x.len()]
                } else {
                    diff.iter().map(|v| v / n).collect()
                }
            }
        }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Likelihood {
    /// Exact class membership `Pr(y = target | x_0)` under the mixture,
    /// with logits divided by `temperature`.
    Classifier {
        model: GmmModel,
        target: usize,
        temperature: f64,
    },
    /// Unnormalized `exp(-|x_0 - center|^2 / (2 omega^2))`.
    Gaussian { center: Vec<f64>, omega_sq: f64 },
    /// `1{x_0 in region}`. `smoothing` enables the differentiable surrogate.
    Indicator { region: Region, smoothing: Option<f64> },
}

impl Likelihood {
    pub fn classifier(model: GmmModel, target: usize, temperature: f64) -> Result<Self> {
        if target >= model.components() {
            return Err(Error::config(
                "likelihood.target_class",
                format!("class {target} out of range for {} components", model.components()),
            ));
        }
        if !(temperature > 0.0) {
            return Err(Error::config("likelihood.temperature", "must be positive"));
        }
        Ok(Likelihood::Classifier {
            model,
            target,
            temperature,
        })
    }

    pub fn gaussian(center: Vec<f64>, omega_sq: f64) -> Result<Self> {
        if !(omega_sq > 0.0) {
            return Err(Error::config("likelihood.omega_sq", "must be positive"));
        }
        Ok(Likelihood::Gaussian { center, omega_sq })
    }

    pub fn indicator(region: Region, smoothing: Option<f64>) -> Result<Self> {
        region.validate()?;
        if let Some(s) = smoothing {
            if !(s > 0.0) {
                return Err(Error::config("likelihood.smoothing", "must be positive"));
            }
        }
        Ok(Likelihood::Indicator { region, smoothing })
    }

    pub fn dim(&self) -> usize {
        match self {
            Likelihood::Classifier { model, .. } => model.dim(),
            Likelihood::Gaussian { center, .. } => center.len(),
            Likelihood::Indicator { region, .. } => region.dim(),
        }
    }

    fn classifier_logits(model: &GmmModel, temperature: f64, x0: &[f64]) -> Vec<f64> {
        let s2 = model.sigma0_sq();
        model
            .means()
            .iter()
            .zip(model.weights())
            .map(|(m, w)| {
                let d2: f64 = x0.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
                (w.ln() - d2 / (2.0 * s2)) / temperature
            })
            .collect()
    }

    /// `log p(y | x_0)`; `-inf` exactly for indicator misses.
    pub fn log_likelihood(&self, x0: &[f64]) -> f64 {
        match self {
            Likelihood::Classifier {
                model,
                target,
                temperature,
            } => {
                let logits = Self::classifier_logits(model, *temperature, x0);
                logits[*target] - log_sum_exp(&logits)
            }
            Likelihood::Gaussian { center, omega_sq } => {
                let d2: f64 = x0.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
                -d2 / (2.0 * omega_sq)
            }
            Likelihood::Indicator { region, .. } => {
                if region.contains(x0) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn likelihood(&self, x0: &[f64]) -> f64 {
        self.log_likelihood(x0).exp()
    }

    /// `-softplus(signed_distance / smoothing)`.
    pub fn smoothed_indicator_log(&self, x0: &[f64], smoothing: f64) -> Result<f64> {
        let Likelihood::Indicator { region, .. } = self else {
            return Err(Error::Contract("smoothed log only defined for indicator likelihoods".into()));
        };
        if !(smoothing > 0.0) {
            return Err(Error::config("likelihood.smoothing", "must be positive"));
        }
        Ok(-softplus(region.signed_distance(x0) / smoothing))
    }

    /// Whether [`Self::surrogate_grad`] is available.
    pub fn is_differentiable(&self) -> bool {
        !matches!(self, Likelihood::Indicator { smoothing: None, .. })
    }

    /// Differentiable stand-in for `log p(y | x_0)` used by guided proposals.
    /// Exact for classifier and Gaussian likelihoods.
    pub fn surrogate_log(&self, x0: &[f64]) -> Result<f64> {
        match self {
            Likelihood::Indicator { smoothing: Some(s), .. } => self.smoothed_indicator_log(x0, *s),
            Likelihood::Indicator { smoothing: None, .. } => Err(Error::Contract(
                "indicator likelihood needs a smoothing length to be used for guidance".into(),
            )),
            _ => Ok(self.log_likelihood(x0)),
        }
    }

    /// Gradient of [`Self::surrogate_log`] in `x_0`.
    pub fn surrogate_grad(&self, x0: &[f64]) -> Result<Vec<f64>> {
        match self {
            Likelihood::Classifier {
                model,
                target,
                temperature,
            } => {
                let logits = Self::classifier_logits(model, *temperature, x0);
                let lse = log_sum_exp(&logits);
                let d = x0.len();
                let mut avg = vec![0.0; d];
                for (l, m) in logits.iter().zip(model.means()) {
                    let p = (l - lse).exp();
                    for (a, mi) in avg.iter_mut().zip(m) {
                        *a += p * mi;
                    }
                }
                let c = 1.0 / (temperature * model.sigma0_sq());
                Ok(model.means()[*target].iter().zip(&avg).map(|(mk, a)| c * (mk - a)).collect())
            }
            Likelihood::Gaussian { center, omega_sq } => {
                Ok(x0.iter().zip(center).map(|(x, c)| -(x - c) / omega_sq).collect())
            }
            Likelihood::Indicator { region, smoothing } => {
                let s = smoothing.ok_or_else(|| {
                    Error::Contract("indicator likelihood needs a smoothing length to be used for guidance".into())
                })?;
                let z = region.signed_distance(x0) / s;
                let coef = -sigmoid(z) / s;
                Ok(region.signed_distance_grad(x0).into_iter().map(|g| coef * g).collect())
            }
        }
    }
}
