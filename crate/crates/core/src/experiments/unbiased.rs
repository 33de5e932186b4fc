//! Replicate means of the naive MC and MLMC estimators against a
//! large-sample reference integrator on the same fine grid.
//!
//! Both estimators are unbiased for the grid-discretized reverse process, so
//! the reference is the fine-grid expectation rather than the continuous
//! truth; the latter is reported alongside to show the discretization gap.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::estimators::{estimate_mlmc, estimate_naive_mc};
use crate::gmm::GmmModel;
use crate::likelihood::Likelihood;
use crate::reverse::reverse_move;
use crate::rng::{Purpose, StreamKey};
use crate::schedule::{make_level_grid, DiffusionSchedule, LevelGrid};
use crate::stats::{mean, sample_variance, std_error};

use super::{fmt, write_table};

#[derive(Clone, Debug, Serialize)]
pub struct UnbiasednessRow {
    pub estimator: String,
    pub t: usize,
    pub replicates: usize,
    pub mean: f64,
    pub std_error: f64,
    pub reference: f64,
    pub reference_se: f64,
    /// `(mean - reference) / sqrt(se^2 + reference_se^2)`.
    pub z: f64,
    /// Expectation under the exact continuous-time posterior.
    pub exact: f64,
    pub nfe_per_replicate: f64,
}

#[derive(Clone, Debug)]
pub struct UnbiasednessStudy {
    pub rows: Vec<UnbiasednessRow>,
    pub fine_steps: usize,
}

impl UnbiasednessStudy {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let header = [
            "estimator",
            "t",
            "replicates",
            "mean",
            "std_error",
            "reference",
            "reference_se",
            "z",
            "exact",
            "nfe_per_replicate",
        ];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.estimator.clone(),
                    r.t.to_string(),
                    r.replicates.to_string(),
                    fmt(r.mean),
                    fmt(r.std_error),
                    fmt(r.reference),
                    fmt(r.reference_se),
                    fmt(r.z),
                    fmt(r.exact),
                    fmt(r.nfe_per_replicate),
                ]
            })
            .collect();
        let path = dir.join("unbiasedness.csv");
        write_table(&path, &header, &rows)?;
        Ok(path)
    }
}

/// Mean and standard error of `p(y | x_0)` over `samples` reverse
/// trajectories on `grid`, written as a plain loop over grid times.
pub fn reference_integral(
    model: &GmmModel,
    schedule: &DiffusionSchedule,
    likelihood: &Likelihood,
    grid: &LevelGrid,
    x_t: &[f64],
    samples: usize,
    key: StreamKey,
) -> Result<(f64, f64)> {
    let vals: Vec<Result<f64>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut noise = key.sample(i as u32).noise(x_t.len());
            let mut x = x_t.to_vec();
            for w in grid.times().windows(2) {
                x = reverse_move(model, schedule, w[0], w[1], &x, &noise.next_vec())?;
            }
            Ok(likelihood.likelihood(&x))
        })
        .collect();
    let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((mean(&vals), std_error(&vals)))
}

/// `E[p(y | x_0) | x_t]` under the exact denoising posterior.
pub fn exact_expectation(
    model: &GmmModel,
    likelihood: &Likelihood,
    alpha_bar: f64,
    x_t: &[f64],
    samples: usize,
    key: StreamKey,
) -> Result<f64> {
    if let Likelihood::Classifier {
        model: m,
        target,
        temperature,
    } = likelihood
    {
        if m == model && *temperature == 1.0 {
            return model.membership_prob(alpha_bar, x_t, *target);
        }
    }
    let post = model.denoising_posterior(alpha_bar, x_t)?;
    let mut rng = key.rng();
    let vals: Vec<f64> = (0..samples).map(|_| likelihood.likelihood(&post.sample(&mut rng))).collect();
    Ok(mean(&vals))
}

pub fn run_unbiasedness_study(cfg: &RunConfig) -> Result<UnbiasednessStudy> {
    let model = cfg.model.build()?;
    let schedule = cfg.schedule.build()?;
    let likelihood = cfg.likelihood.build(&model)?;
    let plan = cfg
        .estimator
        .plan()?
        .ok_or_else(|| Error::config("estimator.kind", "the unbiasedness study needs an mlmc estimator"))?;
    let spec = &cfg.unbiasedness;
    let t = spec.t;
    let x_t = &spec.x_t;
    let t_start = t as f64;
    let fine = make_level_grid(&schedule, t_start, plan.base_steps_at(t_start), plan.refinement, plan.max_level())?;
    let study = StreamKey::new(cfg.seed, Purpose::Study);

    let (reference, reference_se) =
        reference_integral(&model, &schedule, &likelihood, &fine, x_t, spec.oracle_samples, study.step(1))?;
    let exact = exact_expectation(
        &model,
        &likelihood,
        schedule.alpha_bar(t),
        x_t,
        spec.oracle_samples,
        study.step(2),
    )?;

    let naive: Vec<Result<(f64, usize)>> = (0..spec.replicates)
        .into_par_iter()
        .map(|r| {
            let key = study.step(3).particle(r as u64);
            let e = estimate_naive_mc(&model, &schedule, &likelihood, x_t, spec.naive_samples, &fine, key)?;
            Ok((e.value, e.n_oracle_calls))
        })
        .collect();
    let mlmc: Vec<Result<(f64, usize)>> = (0..spec.replicates)
        .into_par_iter()
        .map(|r| {
            let key = study.step(4).particle(r as u64);
            let e = estimate_mlmc(&model, &schedule, &likelihood, t, x_t, &plan, key)?;
            Ok((e.value, e.n_oracle_calls))
        })
        .collect();

    let mut rows = Vec::new();
    for (name, res) in [("naive_mc", naive), ("mlmc", mlmc)] {
        let res = res.into_iter().collect::<Result<Vec<_>>>()?;
        let vals: Vec<f64> = res.iter().map(|v| v.0).collect();
        let nfe = res.iter().map(|v| v.1 as f64).sum::<f64>() / res.len() as f64;
        let m = mean(&vals);
        let se = (sample_variance(&vals) / vals.len() as f64).sqrt();
        rows.push(UnbiasednessRow {
            estimator: name.to_string(),
            t,
            replicates: vals.len(),
            mean: m,
            std_error: se,
            reference,
            reference_se,
            z: (m - reference) / (se * se + reference_se * reference_se).sqrt(),
            exact,
            nfe_per_replicate: nfe,
        });
    }
    Ok(UnbiasednessStudy {
        rows,
        fine_steps: fine.steps(),
    })
}
