//! Estimators of the marginal likelihood `p(y | x_t)`.
//!
//! - DPS point estimate: `p(y | E[x_0 | x_t])`. Biased.
//! - Gaussian-kernel MC: average of `p(y | .)` over a Gaussian centred at the
//!   posterior mean. Biased, one oracle call.
//! - Naive MC: average of `p(y | x_0^(i))` over reverse-process endpoints.
//!   Unbiased for the grid-discretized process.
//! - MLMC: telescoping sum over nested grids with synchronously coupled
//!   coarse/fine pairs. Unbiased for the finest grid.
//!
//! All values are returned in log space together with the number of oracle
//! evaluations spent.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::likelihood::Likelihood;
use crate::reverse::{coupled_denoise, denoise_trajectory, ScoreOracle};
use crate::rng::{Purpose, StreamKey};
use crate::schedule::{make_level_grid, DiffusionSchedule, LevelGrid};
use crate::stats::{log_mean_exp, sample_variance};

/// Linear-space floor used when the telescoped MLMC sum is not positive.
pub const MLMC_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodEstimate {
    pub log_value: f64,
    /// The estimate in linear space before any clamping. Can be negative
    /// for MLMC.
    pub value: f64,
    pub n_oracle_calls: usize,
    /// Sample variance of the per-sample terms, one entry per level.
    pub variance_proxy: Option<Vec<f64>>,
    /// Set when an MLMC sum was clamped to [`MLMC_FLOOR`].
    pub clamped: bool,
}

impl LikelihoodEstimate {
    fn exact(log_value: f64) -> Self {
        Self {
            log_value,
            value: log_value.exp(),
            n_oracle_calls: 0,
            variance_proxy: None,
            clamped: false,
        }
    }
}

/// Below-threshold override of the base step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicBase {
    /// Applies for `t <= max_t`.
    pub max_t: f64,
    pub base_steps: usize,
}

/// Level hierarchy of the MLMC estimator. Level `l` integrates with
/// `base_steps * refinement^l` steps and uses `n_samples[l]` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmcPlan {
    pub base_steps: usize,
    pub refinement: usize,
    pub n_samples: Vec<usize>,
    #[serde(default)]
    pub dynamic_base: Vec<DynamicBase>,
}

impl MlmcPlan {
    pub fn new(base_steps: usize, refinement: usize, n_samples: Vec<usize>) -> Result<Self> {
        let plan = Self {
            base_steps,
            refinement,
            n_samples,
            dynamic_base: Vec::new(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn with_dynamic_base(mut self, max_t: f64, base_steps: usize) -> Self {
        self.dynamic_base.push(DynamicBase { max_t, base_steps });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_steps < 1 {
            return Err(Error::config("estimator.plan.T0", "must be at least 1"));
        }
        if self.refinement < 2 {
            return Err(Error::config("estimator.plan.M", "must be at least 2"));
        }
        if self.n_samples.is_empty() {
            return Err(Error::config("estimator.plan.n_samples", "need at least one level"));
        }
        if let Some(l) = self.n_samples.iter().position(|n| *n == 0) {
            return Err(Error::config(
                format!("estimator.plan.n_samples[{l}]"),
                "sample counts must be at least 1",
            ));
        }
        if let Some(i) = self.dynamic_base.iter().position(|d| d.base_steps < 1) {
            return Err(Error::config(
                format!("estimator.plan.dynamic_T0[{i}].T0"),
                "must be at least 1",
            ));
        }
        Ok(())
    }

    /// Messages for soft violations (sample counts increasing with level).
    pub fn warnings(&self) -> Vec<String> {
        self.n_samples
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] > w[0])
            .map(|(l, w)| format!("N_{} = {} exceeds N_{} = {}", l + 1, w[1], l, w[0]))
            .collect()
    }

    /// Finest level index `L`.
    pub fn max_level(&self) -> usize {
        self.n_samples.len() - 1
    }

    /// Base step count in force at time `t`.
    pub fn base_steps_at(&self, t: f64) -> usize {
        self.dynamic_base
            .iter()
            .filter(|d| t <= d.max_t)
            .min_by(|a, b| a.max_t.total_cmp(&b.max_t))
            .map(|d| d.base_steps)
            .unwrap_or(self.base_steps)
    }

    pub fn level_steps(&self, t: f64, level: usize) -> usize {
        self.base_steps_at(t) * self.refinement.pow(level as u32)
    }

    /// Oracle calls of one estimate at time `t` with a unit-cost oracle.
    pub fn cost_at(&self, t: f64) -> usize {
        self.n_samples
            .iter()
            .enumerate()
            .map(|(l, n)| {
                let coarse = if l > 0 { self.level_steps(t, l - 1) } else { 0 };
                n * (self.level_steps(t, l) + coarse)
            })
            .sum()
    }
}

/// Estimator choice with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    Dps,
    GaussianMc {
        samples: usize,
        kernel_var: f64,
    },
    NaiveMc {
        samples: usize,
        /// Grid steps from `t` to 0; `None` uses every integer step.
        #[serde(default)]
        steps: Option<usize>,
    },
    Mlmc(MlmcPlan),
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Dps => "dps",
            Estimator::GaussianMc { .. } => "gaussian_mc",
            Estimator::NaiveMc { .. } => "naive_mc",
            Estimator::Mlmc(_) => "mlmc",
        }
    }

    /// Estimates `log p(y | x_t)`. `key` fixes the randomness; its
    /// level and sample fields are overwritten per draw.
    #[allow(clippy::too_many_arguments)]
    pub fn estimate<O: ScoreOracle + ?Sized>(
        &self,
        oracle: &O,
        model: &GmmModel,
        schedule: &DiffusionSchedule,
        likelihood: &Likelihood,
        t: usize,
        x_t: &[f64],
        key: StreamKey,
    ) -> Result<LikelihoodEstimate> {
        match self {
            Estimator::Dps => estimate_dps(model, schedule, likelihood, t, x_t),
            Estimator::GaussianMc { samples, kernel_var } => {
                estimate_gaussian_mc(model, schedule, likelihood, t, x_t, *samples, *kernel_var, key)
            }
            Estimator::NaiveMc { samples, steps } => {
                if t == 0 {
                    return Ok(LikelihoodEstimate::exact(likelihood.log_likelihood(x_t)));
                }
                let grid = LevelGrid::uniform(t as f64, steps.unwrap_or(t))?;
                estimate_naive_mc(oracle, schedule, likelihood, x_t, *samples, &grid, key)
            }
            Estimator::Mlmc(plan) => estimate_mlmc(oracle, schedule, likelihood, t, x_t, plan, key),
        }
    }
}

/// `log p(y | E[x_0 | x_t])`.
pub fn estimate_dps(
    model: &GmmModel,
    schedule: &DiffusionSchedule,
    likelihood: &Likelihood,
    t: usize,
    x_t: &[f64],
) -> Result<LikelihoodEstimate> {
    if t == 0 {
        return Ok(LikelihoodEstimate::exact(likelihood.log_likelihood(x_t)));
    }
    let mean = model.posterior_mean(schedule.alpha_bar(t), x_t)?;
    let log_value = likelihood.log_likelihood(&mean);
    Ok(LikelihoodEstimate {
        log_value,
        value: log_value.exp(),
        n_oracle_calls: 1,
        variance_proxy: None,
        clamped: false,
    })
}

/// Average likelihood over `N(E[x_0 | x_t], kernel_var I)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_gaussian_mc(
    model: &GmmModel,
    schedule: &DiffusionSchedule,
    likelihood: &Likelihood,
    t: usize,
    x_t: &[f64],
    samples: usize,
    kernel_var: f64,
    key: StreamKey,
) -> Result<LikelihoodEstimate> {
    if samples < 1 {
        return Err(Error::config("estimator.samples", "must be at least 1"));
    }
    if !(kernel_var > 0.0) {
        return Err(Error::config("estimator.kernel_var", "must be positive"));
    }
    if t == 0 {
        return Ok(LikelihoodEstimate::exact(likelihood.log_likelihood(x_t)));
    }
    let mean = model.posterior_mean(schedule.alpha_bar(t), x_t)?;
    let sd = kernel_var.sqrt();
    let mut rng = key.purpose(Purpose::Kernel).rng();
    let logs: Vec<f64> = (0..samples)
        .map(|_| {
            let x: Vec<f64> = mean
                .iter()
                .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            likelihood.log_likelihood(&x)
        })
        .collect();
    let lin: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
    let log_value = log_mean_exp(&logs);
    Ok(LikelihoodEstimate {
        log_value,
        value: log_value.exp(),
        n_oracle_calls: 1,
        variance_proxy: Some(vec![sample_variance(&lin)]),
        clamped: false,
    })
}

/// Mean of `p(y | x_0^(i))` over `samples` independent reverse trajectories
/// on `grid`, aggregated in log space.
pub fn estimate_naive_mc<O: ScoreOracle + ?Sized>(
    oracle: &O,
    schedule: &DiffusionSchedule,
    likelihood: &Likelihood,
    x_t: &[f64],
    samples: usize,
    grid: &LevelGrid,
    key: StreamKey,
) -> Result<LikelihoodEstimate> {
    if samples < 1 {
        return Err(Error::config("estimator.samples", "must be at least 1"));
    }
    let key = key.purpose(Purpose::Estimate).level(grid.level() as u32);
    let mut logs = Vec::with_capacity(samples);
    let mut calls = 0;
    for i in 0..samples {
        let mut stream = key.sample(i as u32).noise(x_t.len());
        let tr = denoise_trajectory(oracle, schedule, grid, x_t, &mut stream)?;
        calls += tr.n_oracle_calls;
        logs.push(likelihood.log_likelihood(&tr.x0));
    }
    let lin: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
    let log_value = log_mean_exp(&logs);
    Ok(LikelihoodEstimate {
        log_value,
        value: log_value.exp(),
        n_oracle_calls: calls,
        variance_proxy: Some(vec![sample_variance(&lin)]),
        clamped: false,
    })
}

/// Telescoping multilevel estimate on grids starting at `t`.
///
/// Level 0 averages `N_0` coarse endpoints; level `l >= 1` averages `N_l`
/// coupled differences `p(y | fine) - p(y | coarse)`. If every likelihood
/// value is zero the result is `-inf`; a non-positive sum with some nonzero
/// term is clamped to [`MLMC_FLOOR`] and flagged.
pub fn estimate_mlmc<O: ScoreOracle + ?Sized>(
    oracle: &O,
    schedule: &DiffusionSchedule,
    likelihood: &Likelihood,
    t: usize,
    x_t: &[f64],
    plan: &MlmcPlan,
    key: StreamKey,
) -> Result<LikelihoodEstimate> {
    plan.validate()?;
    if t == 0 {
        return Ok(LikelihoodEstimate::exact(likelihood.log_likelihood(x_t)));
    }
    let t_start = t as f64;
    let base = plan.base_steps_at(t_start);
    let key = key.purpose(Purpose::Estimate);
    // (log fine, log coarse) per sample; coarse is -inf on level 0
    let mut levels: Vec<Vec<(f64, f64)>> = Vec::with_capacity(plan.n_samples.len());
    let mut calls = 0;
    for (l, &n) in plan.n_samples.iter().enumerate() {
        let grid = make_level_grid(schedule, t_start, base, plan.refinement, l)?;
        let lkey = key.level(l as u32);
        let mut terms = Vec::with_capacity(n);
        for i in 0..n {
            let mut stream = lkey.sample(i as u32).noise(x_t.len());
            if l == 0 {
                let tr = denoise_trajectory(oracle, schedule, &grid, x_t, &mut stream)?;
                calls += tr.n_oracle_calls;
                terms.push((likelihood.log_likelihood(&tr.x0), f64::NEG_INFINITY));
            } else {
                let pair = coupled_denoise(oracle, schedule, &grid, x_t, &mut stream)?;
                calls += pair.n_oracle_calls;
                terms.push((
                    likelihood.log_likelihood(&pair.x0_fine),
                    likelihood.log_likelihood(&pair.x0_coarse),
                ));
            }
        }
        levels.push(terms);
    }

    let shift = levels
        .iter()
        .flatten()
        .flat_map(|(a, b)| [*a, *b])
        .fold(f64::NEG_INFINITY, f64::max);
    let variance_proxy: Vec<f64> = levels
        .iter()
        .map(|terms| {
            let diffs: Vec<f64> = terms.iter().map(|(f, c)| f.exp() - c.exp()).collect();
            sample_variance(&diffs)
        })
        .collect();
    if shift == f64::NEG_INFINITY {
        return Ok(LikelihoodEstimate {
            log_value: f64::NEG_INFINITY,
            value: 0.0,
            n_oracle_calls: calls,
            variance_proxy: Some(variance_proxy),
            clamped: false,
        });
    }
    let scaled_sum: f64 = levels
        .iter()
        .map(|terms| {
            terms.iter().map(|(f, c)| (f - shift).exp() - (c - shift).exp()).sum::<f64>() / terms.len() as f64
        })
        .sum();
    let (log_value, clamped) = if scaled_sum > 0.0 {
        (scaled_sum.ln() + shift, false)
    } else {
        (MLMC_FLOOR.ln(), true)
    };
    Ok(LikelihoodEstimate {
        log_value,
        value: scaled_sum * shift.exp(),
        n_oracle_calls: calls,
        variance_proxy: Some(variance_proxy),
        clamped,
    })
}
