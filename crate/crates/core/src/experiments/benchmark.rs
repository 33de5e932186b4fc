//! Head-to-head sampler comparisons over many seeds.
//!
//! - `guidance`: SMC weighted by each estimator (DPS, Gaussian-kernel MC,
//!   naive MC, MLMC) against unguided sampling with a final SIR step, all at
//!   the same particle count.
//! - `rare_event`: the configured (guided) SMC sampler against naive SIR
//!   with a matched oracle budget on an indicator likelihood.
//! - `schedule_sweep`: the configured sampler over several resampling
//!   schedules.
//!
//! A run that fails because every particle is infeasible counts as a run
//! with no successes and is tallied in `failed_runs`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::estimators::Estimator;
use crate::gmm::GmmModel;
use crate::likelihood::{Likelihood, Region};
use crate::schedule::DiffusionSchedule;
use crate::smc::{run_sampler, Proposal, ResampleMethod, ResampleSchedule, SamplerConfig};
use crate::stats::{log_mean_exp, mean};

use super::{cost_per_success, fmt, write_table, write_timing, REPORT_HEADER};

/// Confidence used for cost-per-success.
pub const CONFIDENCE: f64 = 0.95;

#[derive(Clone, Debug, Serialize)]
pub struct MethodRow {
    pub method: String,
    /// The headline rate: per-particle accuracy for guidance tasks, the
    /// fraction of runs with at least one success for rare events.
    pub success_rate: f64,
    pub run_success_rate: f64,
    pub particle_accuracy: f64,
    /// Mean over runs of the log of the average final-particle likelihood.
    pub mean_log_lik: f64,
    /// Mean oracle calls per run.
    pub nfe: f64,
    pub nfe_total: usize,
    /// Modeled seconds per run.
    pub wall_time_s: f64,
    pub cost_per_success_s: f64,
    pub runs: usize,
    pub failed_runs: usize,
    pub clamped_estimates: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkReport {
    pub experiment: String,
    pub digest: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<MethodRow>,
    pub extra: serde_json::Value,
    #[serde(skip)]
    pub timings: BTreeMap<String, Duration>,
}

impl BenchmarkReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.method.clone(),
                    fmt(r.success_rate),
                    fmt(r.nfe),
                    fmt(r.wall_time_s),
                    fmt(r.cost_per_success_s),
                ]
            })
            .collect();
        let csv = dir.join("report.csv");
        write_table(&csv, &REPORT_HEADER, &rows)?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n")?;
        let timing = write_timing(dir, &self.timings)?;
        Ok(vec![csv, json, timing])
    }

    pub fn headline(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for r in &self.rows {
            m.insert(
                r.method.clone(),
                serde_json::json!({
                    "success_rate": r.success_rate,
                    "run_success_rate": r.run_success_rate,
                    "nfe": r.nfe,
                    "failed_runs": r.failed_runs,
                }),
            );
        }
        serde_json::Value::Object(m)
    }
}

/// Whether `x` belongs to `target` by exact membership at `t = 0`: argmax
/// for more than two components, probability above one half for two.
pub fn classified_as(model: &GmmModel, x: &[f64], target: usize) -> Result<bool> {
    let r = model.responsibilities(1.0, x)?;
    if r.len() == 2 {
        return Ok(r[target] > 0.5);
    }
    let best = r
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap_or(0);
    Ok(best == target)
}

struct RunOutcome {
    hits: usize,
    particles: usize,
    log_lik: f64,
    nfe: usize,
    failed: bool,
    clamped: usize,
}

struct Problem<'a> {
    model: &'a GmmModel,
    schedule: &'a DiffusionSchedule,
    likelihood: &'a Likelihood,
}

fn run_seeds<F>(
    problem: &Problem,
    template: &SamplerConfig,
    seeds: &[u64],
    success: F,
) -> Result<(Vec<RunOutcome>, Duration)>
where
    F: Fn(&[f64]) -> Result<bool> + Sync,
{
    let start = Instant::now();
    let outcomes: Vec<Result<RunOutcome>> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = SamplerConfig {
                seed,
                ..template.clone()
            };
            match run_sampler(problem.model, problem.schedule, problem.likelihood, &cfg) {
                Ok(out) => {
                    let mut hits = 0;
                    for x in &out.particles.states {
                        hits += success(x)? as usize;
                    }
                    let logs: Vec<f64> = out
                        .particles
                        .states
                        .iter()
                        .map(|x| problem.likelihood.log_likelihood(x))
                        .collect();
                    Ok(RunOutcome {
                        hits,
                        particles: out.particles.len(),
                        log_lik: log_mean_exp(&logs),
                        nfe: out.nfe,
                        failed: false,
                        clamped: out.clamped_estimates,
                    })
                }
                Err(Error::AllInfeasible { .. }) => Ok(RunOutcome {
                    hits: 0,
                    particles: cfg.n_particles,
                    log_lik: f64::NEG_INFINITY,
                    nfe: 0,
                    failed: true,
                    clamped: 0,
                }),
                Err(e) => Err(e),
            }
        })
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((outcomes, start.elapsed()))
}

/// `nominal_nfe` is the per-run cost used when every run failed before
/// reporting its own count.
fn summarize(
    method: &str,
    outcomes: &[RunOutcome],
    seconds_per_nfe: f64,
    run_level: bool,
    nominal_nfe: Option<f64>,
) -> Result<MethodRow> {
    let acc: Vec<f64> = outcomes.iter().map(|o| o.hits as f64 / o.particles as f64).collect();
    let runs: Vec<f64> = outcomes.iter().map(|o| (o.hits > 0) as u8 as f64).collect();
    let nfe_total: usize = outcomes.iter().map(|o| o.nfe).sum();
    // failed runs abort early; charge them the mean cost of completed runs
    let completed: Vec<f64> = outcomes.iter().filter(|o| !o.failed).map(|o| o.nfe as f64).collect();
    let nfe = if completed.is_empty() {
        nominal_nfe.unwrap_or(f64::NAN)
    } else {
        mean(&completed)
    };
    let particle_accuracy = mean(&acc);
    let run_success_rate = mean(&runs);
    let success_rate = if run_level { run_success_rate } else { particle_accuracy };
    let wall = nfe * seconds_per_nfe;
    let cps = if wall > 0.0 && wall.is_finite() {
        cost_per_success(success_rate, wall, CONFIDENCE)?
    } else {
        f64::INFINITY
    };
    Ok(MethodRow {
        method: method.to_string(),
        success_rate,
        run_success_rate,
        particle_accuracy,
        mean_log_lik: mean(&outcomes.iter().map(|o| o.log_lik).collect::<Vec<_>>()),
        nfe,
        nfe_total,
        wall_time_s: wall,
        cost_per_success_s: cps,
        runs: outcomes.len(),
        failed_runs: outcomes.iter().filter(|o| o.failed).count(),
        clamped_estimates: outcomes.iter().map(|o| o.clamped).sum(),
    })
}

/// Unconditional particles reweighted once by the exact likelihood at `t = 0`.
pub fn sir_config(n_particles: usize) -> SamplerConfig {
    SamplerConfig {
        n_particles,
        resampling: ResampleSchedule::new(vec![1], ResampleMethod::Systematic),
        proposal: Proposal::Unconditional,
        estimator: Estimator::Dps,
        seed: 0,
    }
}

pub fn run_guidance_benchmark(cfg: &RunConfig) -> Result<BenchmarkReport> {
    let r = cfg.resolve()?;
    let problem = Problem {
        model: &r.model,
        schedule: &r.schedule,
        likelihood: &r.likelihood,
    };
    let seeds = cfg.seeds();
    let target = r.target_class;
    let success = |x: &[f64]| classified_as(&r.model, x, target);
    let methods: Vec<(&str, SamplerConfig)> = vec![
        ("dps_smc", cfg.sampler_config(Estimator::Dps, 0)),
        ("gaussian_mc_smc", cfg.sampler_config(cfg.benchmark.gaussian_mc.build()?, 0)),
        ("naive_mc_smc", cfg.sampler_config(cfg.benchmark.naive_mc.build()?, 0)),
        ("mlmc_smc", cfg.sampler_config(r.estimator.clone(), 0)),
        ("unguided_sir", sir_config(cfg.smc.particles)),
    ];
    let mut rows = Vec::new();
    let mut timings = BTreeMap::new();
    for (name, template) in methods {
        let (outcomes, elapsed) = run_seeds(&problem, &template, &seeds, success)?;
        let nominal = (name == "unguided_sir").then(|| (template.n_particles * r.schedule.steps()) as f64);
        rows.push(summarize(name, &outcomes, cfg.seconds_per_nfe, false, nominal)?);
        timings.insert(name.to_string(), elapsed);
    }
    Ok(BenchmarkReport {
        experiment: "guidance".into(),
        digest: cfg.digest()?,
        seeds,
        rows,
        extra: serde_json::json!({ "target_class": target, "particles": cfg.smc.particles }),
        timings,
    })
}

pub fn run_rare_event_benchmark(cfg: &RunConfig) -> Result<BenchmarkReport> {
    let r = cfg.resolve()?;
    let Likelihood::Indicator { region, .. } = &r.likelihood else {
        return Err(Error::config("likelihood.kind", "the rare-event benchmark needs an indicator likelihood"));
    };
    let problem = Problem {
        model: &r.model,
        schedule: &r.schedule,
        likelihood: &r.likelihood,
    };
    let seeds = cfg.seeds();
    let inside = |x: &[f64]| Ok(region.contains(x));
    let mut timings = BTreeMap::new();

    let template = cfg.sampler_config(r.estimator.clone(), 0);
    let (outcomes, elapsed) = run_seeds(&problem, &template, &seeds, inside)?;
    let smc = summarize("guided_smc_mlmc", &outcomes, cfg.seconds_per_nfe, true, None)?;
    timings.insert(smc.method.clone(), elapsed);

    let steps = r.schedule.steps();
    let budget = if cfg.rare_event.sir_budget > 0 {
        cfg.rare_event.sir_budget
    } else {
        ((smc.nfe / steps as f64).round() as usize).max(1)
    };
    let (outcomes, elapsed) = run_seeds(&problem, &sir_config(budget), &seeds, inside)?;
    let sir = summarize("naive_sir", &outcomes, cfg.seconds_per_nfe, true, Some((budget * steps) as f64))?;
    timings.insert(sir.method.clone(), elapsed);

    let p_a = match region {
        Region::Box { lower, upper } => Some(r.model.box_mass(lower, upper)?),
        Region::Ball { .. } => None,
    };
    let sir_expected = p_a.map(|p| 1.0 - (1.0 - p).powf(budget as f64));
    let ratio = if sir.success_rate > 0.0 {
        smc.success_rate / sir.success_rate
    } else {
        f64::INFINITY
    };
    Ok(BenchmarkReport {
        experiment: "rare_event".into(),
        digest: cfg.digest()?,
        seeds,
        extra: serde_json::json!({
            "region_prior_mass": p_a,
            "sir_budget": budget,
            "sir_expected_success": sir_expected,
            "ratio_to_expected_sir": sir_expected.map(|p| smc.success_rate / p),
            "success_ratio": if ratio.is_finite() { serde_json::json!(ratio) } else { serde_json::json!("inf") },
        }),
        rows: vec![smc, sir],
        timings,
    })
}

/// Label of a resampling schedule in reports.
pub fn schedule_label(steps: &[usize]) -> String {
    if steps.is_empty() {
        "resample_none".into()
    } else {
        let parts: Vec<String> = steps.iter().map(|s| s.to_string()).collect();
        format!("resample_{}", parts.join("-"))
    }
}

pub fn run_schedule_sweep(cfg: &RunConfig) -> Result<BenchmarkReport> {
    let r = cfg.resolve()?;
    let problem = Problem {
        model: &r.model,
        schedule: &r.schedule,
        likelihood: &r.likelihood,
    };
    let seeds = cfg.seeds();
    let target = r.target_class;
    let success = |x: &[f64]| classified_as(&r.model, x, target);
    let mut rows = Vec::new();
    let mut timings = BTreeMap::new();
    let mut sizes = Vec::new();
    for steps in &cfg.sweep.schedules {
        let mut template = cfg.sampler_config(r.estimator.clone(), 0);
        template.resampling.steps = ResampleSchedule::new(steps.clone(), cfg.smc.method).steps;
        let label = schedule_label(&template.resampling.steps);
        let (outcomes, elapsed) = run_seeds(&problem, &template, &seeds, success)?;
        rows.push(summarize(&label, &outcomes, cfg.seconds_per_nfe, false, None)?);
        timings.insert(label, elapsed);
        sizes.push(steps.len());
    }
    Ok(BenchmarkReport {
        experiment: "schedule_sweep".into(),
        digest: cfg.digest()?,
        seeds,
        rows,
        extra: serde_json::json!({ "schedule_sizes": sizes }),
        timings,
    })
}
