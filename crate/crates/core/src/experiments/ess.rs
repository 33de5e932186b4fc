//! ESS traces with and without resampling.
//!
//! Both arms weight the particles after every reverse step using the
//! monitoring estimator. The scheduled arm additionally resamples at the
//! configured steps; each resample emits a second row at the same `t` with
//! the restored ESS and the new epoch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::smc::{run_sampler, ResampleSchedule, SamplerConfig, TraceRow};

use super::{fmt, write_table, write_timing, TRACE_HEADER};

#[derive(Clone, Debug, Serialize)]
pub struct TraceLine {
    pub run_id: String,
    pub t: usize,
    pub ess: f64,
    pub epoch: u32,
    pub nfe: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EssSummary {
    pub particles: usize,
    pub resample_steps: Vec<usize>,
    /// Last ESS of each run without resampling.
    pub off_final_ess: Vec<f64>,
    /// ESS right after every resample of the scheduled arm.
    pub on_post_resample_ess: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EssStudy {
    pub lines: Vec<TraceLine>,
    pub summary: EssSummary,
    pub timings: BTreeMap<String, Duration>,
}

impl EssStudy {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let rows: Vec<Vec<String>> = self
            .lines
            .iter()
            .map(|l| {
                vec![
                    l.run_id.clone(),
                    l.t.to_string(),
                    fmt(l.ess),
                    l.epoch.to_string(),
                    l.nfe.to_string(),
                ]
            })
            .collect();
        let csv = dir.join("traces.csv");
        write_table(&csv, &TRACE_HEADER, &rows)?;
        let summary = dir.join("ess_summary.json");
        std::fs::write(&summary, serde_json::to_string_pretty(&self.summary)? + "\n")?;
        Ok(vec![csv, summary, write_timing(dir, &self.timings)?])
    }

    /// Lines of one run, in order.
    pub fn run(&self, run_id: &str) -> Vec<&TraceLine> {
        self.lines.iter().filter(|l| l.run_id == run_id).collect()
    }
}

/// Flattens a sampler trace into table lines.
pub fn trace_lines(run_id: &str, trace: &[TraceRow], particles: usize) -> Vec<TraceLine> {
    let mut out = Vec::with_capacity(trace.len());
    for r in trace {
        out.push(TraceLine {
            run_id: run_id.to_string(),
            t: r.t,
            ess: r.ess,
            epoch: r.epoch,
            nfe: r.nfe_cumulative,
        });
        if r.resampled {
            out.push(TraceLine {
                run_id: run_id.to_string(),
                t: r.t,
                ess: particles as f64,
                epoch: r.epoch + 1,
                nfe: r.nfe_cumulative,
            });
        }
    }
    out
}

pub fn run_ess_trace_study(cfg: &RunConfig) -> Result<EssStudy> {
    let r = cfg.resolve()?;
    let monitor = cfg.ess.monitor.build()?;
    let n = cfg.smc.particles;
    let seeds: Vec<u64> = (0..cfg.ess.runs as u64).map(|i| cfg.seed.wrapping_add(i)).collect();

    let off = ResampleSchedule::monitor_only();
    let mut on = cfg.smc.resample_schedule();
    on.monitor_every_step = true;
    on.adaptive_threshold = None;

    let mut jobs = Vec::new();
    for (arm, rs) in [("off", &off), ("on", &on)] {
        for &seed in &seeds {
            jobs.push((format!("{arm}-{seed}"), rs.clone(), seed));
        }
    }
    let start = Instant::now();
    let results: Vec<Result<(String, Vec<TraceRow>)>> = jobs
        .into_par_iter()
        .map(|(id, rs, seed)| {
            let sc = SamplerConfig {
                n_particles: n,
                resampling: rs,
                proposal: cfg.proposal.clone(),
                estimator: monitor.clone(),
                seed,
            };
            let out = run_sampler(&r.model, &r.schedule, &r.likelihood, &sc)?;
            Ok((id, out.trace))
        })
        .collect();
    let elapsed = start.elapsed();

    let mut lines = Vec::new();
    let mut off_final = Vec::new();
    let mut on_post = Vec::new();
    for res in results {
        let (id, trace) = res?;
        if id.starts_with("off") {
            off_final.push(trace.last().map(|r| r.ess).unwrap_or(n as f64));
        }
        let l = trace_lines(&id, &trace, n);
        if id.starts_with("on") {
            on_post.extend(
                l.windows(2)
                    .filter(|w| w[0].t == w[1].t && w[1].epoch == w[0].epoch + 1)
                    .map(|w| w[1].ess),
            );
        }
        lines.extend(l);
    }
    let mut timings = BTreeMap::new();
    timings.insert("ess_trace".to_string(), elapsed);
    Ok(EssStudy {
        lines,
        summary: EssSummary {
            particles: n,
            resample_steps: on.steps.clone(),
            off_final_ess: off_final,
            on_post_resample_ess: on_post,
        },
        timings,
    })
}
