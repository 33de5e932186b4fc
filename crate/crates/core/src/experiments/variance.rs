//! Per-level variances of the coupled differences and the fitted decay rate.
//!
//! For each level `l` the study draws `pairs` samples of `Y_0 = P_0` or
//! `Y_l = P_l - P_{l-1}` (synchronously coupled), records `V_l = Var(Y_l)`
//! and the oracle cost per sample, fits `log_M V_l = a - beta * l` over
//! `l >= 1`, and bootstraps a 95% interval for `beta`. It then compares
//! the cost of MLMC against naive MC on the finest grid at matched variance.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::likelihood::Likelihood;
use crate::reverse::{coupled_denoise, denoise_trajectory};
use crate::rng::{Purpose, StreamKey};
use crate::schedule::{equispaced_times, make_level_grid, DiffusionSchedule, LevelGrid};
use crate::stats::{linear_fit, mean, quantile, sample_variance};

use super::{fmt, write_table, VARIANCE_HEADER};

#[derive(Clone, Debug, Serialize)]
pub struct LevelStat {
    pub level: usize,
    pub variance: f64,
    /// Oracle calls per sample (fine plus coarse path).
    pub cost: f64,
    pub n_pairs: usize,
    pub mean: f64,
    /// Moments of the fine endpoint term `P_l` alone.
    pub fine_mean: f64,
    pub fine_variance: f64,
    /// Steps of the level-`l` grid.
    pub fine_steps: usize,
    #[serde(skip)]
    pub samples: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostComparison {
    pub target_variance: f64,
    pub mlmc_samples: Vec<usize>,
    pub mlmc_variance: f64,
    pub mlmc_cost: f64,
    pub naive_samples: usize,
    pub naive_cost: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VarianceFit {
    pub beta: Option<f64>,
    pub intercept: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub bootstrap: usize,
    /// Optimal allocation at the configured tolerance.
    pub optimal: Option<CostComparison>,
    /// The configured estimator's sample counts.
    pub configured: Option<CostComparison>,
}

#[derive(Clone, Debug)]
pub struct VarianceStudy {
    pub levels: Vec<LevelStat>,
    pub fit: VarianceFit,
}

impl VarianceStudy {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let rows: Vec<Vec<String>> = self
            .levels
            .iter()
            .map(|l| vec![l.level.to_string(), fmt(l.variance), fmt(l.cost), l.n_pairs.to_string()])
            .collect();
        let table = dir.join("variance.csv");
        write_table(&table, &VARIANCE_HEADER, &rows)?;
        let fit = dir.join("variance_fit.json");
        std::fs::write(&fit, serde_json::to_string_pretty(&self.fit)? + "\n")?;
        Ok(vec![table, fit])
    }
}

/// Level grid that also accepts the degenerate refinement 1, where the
/// "coarse" grid equals the fine one.
fn grid_for(schedule: &DiffusionSchedule, t: f64, base: usize, refinement: usize, level: usize) -> Result<LevelGrid> {
    if refinement == 1 {
        LevelGrid::from_times(equispaced_times(t, base), level, 1)
    } else {
        make_level_grid(schedule, t, base, refinement, level)
    }
}

/// Samples `Y_l` for `l = 0..=max_level`.
#[allow(clippy::too_many_arguments)]
pub fn level_statistics(
    model: &GmmModel,
    schedule: &DiffusionSchedule,
    likelihood: &Likelihood,
    t: usize,
    x_t: &[f64],
    base_steps: usize,
    refinement: usize,
    max_level: usize,
    pairs: usize,
    key: StreamKey,
) -> Result<Vec<LevelStat>> {
    (0..=max_level)
        .map(|l| {
            let grid = grid_for(schedule, t as f64, base_steps, refinement, l)?;
            let draws: Vec<Result<(f64, f64, usize)>> = (0..pairs)
                .into_par_iter()
                .map(|i| {
                    let mut noise = key.level(l as u32).sample(i as u32).noise(x_t.len());
                    if l == 0 {
                        let tr = denoise_trajectory(model, schedule, &grid, x_t, &mut noise)?;
                        let p = likelihood.likelihood(&tr.x0);
                        Ok((p, p, tr.n_oracle_calls))
                    } else {
                        let pair = coupled_denoise(model, schedule, &grid, x_t, &mut noise)?;
                        let pf = likelihood.likelihood(&pair.x0_fine);
                        let pc = likelihood.likelihood(&pair.x0_coarse);
                        Ok((pf - pc, pf, pair.n_oracle_calls))
                    }
                })
                .collect();
            let draws = draws.into_iter().collect::<Result<Vec<_>>>()?;
            let y: Vec<f64> = draws.iter().map(|d| d.0).collect();
            let fine: Vec<f64> = draws.iter().map(|d| d.1).collect();
            let calls: usize = draws.iter().map(|d| d.2).sum();
            Ok(LevelStat {
                level: l,
                variance: sample_variance(&y),
                cost: calls as f64 / pairs as f64,
                n_pairs: pairs,
                mean: mean(&y),
                fine_mean: mean(&fine),
                fine_variance: sample_variance(&fine),
                fine_steps: grid.steps(),
                samples: y,
            })
        })
        .collect()
}

/// `(intercept, beta)` of `log_M V_l = a - beta * l` over levels `>= 1`.
/// `None` when fewer than two usable levels or any variance is zero.
pub fn fit_decay(variances: &[f64], refinement: usize) -> Option<(f64, f64)> {
    if variances.len() < 3 || refinement < 2 || variances[1..].iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    let lm = (refinement as f64).ln();
    let x: Vec<f64> = (1..variances.len()).map(|l| l as f64).collect();
    let y: Vec<f64> = variances[1..].iter().map(|v| v.ln() / lm).collect();
    let (a, slope) = linear_fit(&x, &y);
    Some((a, -slope))
}

/// Sample counts, variance and cost of MLMC with `n` samples per level,
/// and of naive MC on the finest of those levels at the same variance.
pub fn compare_costs(levels: &[LevelStat], n: &[usize], target_variance: f64) -> CostComparison {
    let used = &levels[..n.len()];
    let mlmc_variance: f64 = used.iter().zip(n).map(|(l, k)| l.variance / *k as f64).sum();
    let mlmc_cost: f64 = used.iter().zip(n).map(|(l, k)| l.cost * *k as f64).sum();
    let fine = used.last().expect("at least one level");
    let naive_samples = if mlmc_variance > 0.0 {
        (fine.fine_variance / mlmc_variance).ceil().max(1.0) as usize
    } else {
        1
    };
    CostComparison {
        target_variance,
        mlmc_samples: n.to_vec(),
        mlmc_variance,
        mlmc_cost,
        naive_samples,
        naive_cost: naive_samples as f64 * fine.fine_steps as f64,
    }
}

/// Standard allocation `N_l ~ sqrt(V_l / C_l) * sum_k sqrt(V_k C_k) / eps^2`.
pub fn optimal_allocation(levels: &[LevelStat], target_variance: f64) -> Vec<usize> {
    let s: f64 = levels.iter().map(|l| (l.variance * l.cost).sqrt()).sum();
    levels
        .iter()
        .map(|l| ((l.variance / l.cost).sqrt() * s / target_variance).ceil().max(1.0) as usize)
        .collect()
}

pub fn run_variance_decay_study(cfg: &RunConfig) -> Result<VarianceStudy> {
    let model = cfg.model.build()?;
    let schedule = cfg.schedule.build()?;
    let likelihood = cfg.likelihood.build(&model)?;
    let plan = cfg
        .estimator
        .plan()?
        .ok_or_else(|| Error::config("estimator.kind", "the variance study needs an mlmc estimator"))?;
    let spec = &cfg.variance;
    let t = spec.t;
    let base = plan.base_steps_at(t as f64);
    let key = StreamKey::new(cfg.seed, Purpose::Study).step(5);
    let levels = level_statistics(
        &model,
        &schedule,
        &likelihood,
        t,
        &spec.x_t,
        base,
        plan.refinement,
        spec.max_level,
        spec.pairs,
        key,
    )?;

    let variances: Vec<f64> = levels.iter().map(|l| l.variance).collect();
    let fit = fit_decay(&variances, plan.refinement);
    let mut betas = Vec::new();
    if fit.is_some() {
        let mut rng = StreamKey::new(cfg.seed, Purpose::Study).step(6).rng();
        for _ in 0..spec.bootstrap {
            let v: Vec<f64> = levels
                .iter()
                .map(|l| {
                    let n = l.samples.len();
                    let boot: Vec<f64> = (0..n).map(|_| l.samples[rng.random_range(0..n)]).collect();
                    sample_variance(&boot)
                })
                .collect();
            if let Some((_, b)) = fit_decay(&v, plan.refinement) {
                betas.push(b);
            }
        }
    }
    let (ci_low, ci_high) = if betas.is_empty() {
        (None, None)
    } else {
        (Some(quantile(&betas, 0.025)), Some(quantile(&betas, 0.975)))
    };

    let fine = levels.last().expect("at least one level");
    let target = spec.relative_tolerance * fine.fine_mean * fine.fine_mean;
    let optimal = (target > 0.0).then(|| compare_costs(&levels, &optimal_allocation(&levels, target), target));
    let configured = (plan.n_samples.len() <= levels.len()).then(|| {
        let c = compare_costs(&levels, &plan.n_samples, f64::NAN);
        CostComparison {
            target_variance: c.mlmc_variance,
            ..c
        }
    });

    Ok(VarianceStudy {
        fit: VarianceFit {
            beta: fit.map(|f| f.1),
            intercept: fit.map(|f| f.0),
            ci_low,
            ci_high,
            bootstrap: betas.len(),
            optimal,
            configured,
        },
        levels,
    })
}
