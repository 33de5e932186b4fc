//! Pilot run: cheap weighting after every step, no resampling, and a
//! suggested resampling schedule read off the ESS trace.

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::smc::{run_sampler, suggest_schedule, ResampleSchedule, SamplerConfig, TraceRow};

#[derive(Clone, Debug, Serialize)]
pub struct PilotReport {
    pub seed: u64,
    pub particles: usize,
    pub trace: Vec<TraceRow>,
    pub nfe: usize,
    pub suggested_steps: Vec<usize>,
}

pub fn run_pilot(cfg: &RunConfig) -> Result<PilotReport> {
    cfg.validate()?;
    let r = cfg.resolve()?;
    let sc = SamplerConfig {
        n_particles: cfg.smc.particles,
        resampling: ResampleSchedule::monitor_only(),
        proposal: cfg.proposal.clone(),
        estimator: cfg.pilot.estimator.build()?,
        seed: cfg.seed,
    };
    let out = run_sampler(&r.model, &r.schedule, &r.likelihood, &sc)?;
    let suggested_steps = suggest_schedule(&out.trace, sc.n_particles, cfg.pilot.suggest, cfg.pilot.threshold);
    Ok(PilotReport {
        seed: cfg.seed,
        particles: sc.n_particles,
        nfe: out.nfe,
        suggested_steps,
        trace: out.trace,
    })
}
