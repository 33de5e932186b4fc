//! Scripted studies. Each one reads a validated [`RunConfig`], returns a
//! typed result, and can write CSV tables plus a JSON metadata sidecar.
//!
//! CSV outputs are byte-reproducible from (config, seed): they contain no
//! measured clock time. Reported `wall_time_s` is modeled as
//! `nfe * seconds_per_nfe`; measured durations go to `timing.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub mod benchmark;
pub mod bias;
pub mod ess;
pub mod metrics;
pub mod pilot;
pub mod posterior;
pub mod unbiased;
pub mod variance;

pub use benchmark::{BenchmarkReport, MethodRow};
pub use metrics::{cost_per_success, runs_needed};

pub const TRACE_HEADER: [&str; 5] = ["run_id", "t", "ess", "epoch", "nfe"];
pub const REPORT_HEADER: [&str; 5] = ["method", "success_rate", "nfe", "wall_time_s", "cost_per_success_s"];
pub const VARIANCE_HEADER: [&str; 4] = ["level", "variance", "cost", "n_pairs"];

/// What an experiment produced.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentSummary {
    pub experiment: String,
    pub digest: String,
    pub files: Vec<PathBuf>,
    /// Headline numbers for the console.
    pub headline: serde_json::Value,
}

#[derive(Serialize)]
struct Metadata<'a> {
    experiment: &'a str,
    digest: String,
    seeds: Vec<u64>,
    config: serde_json::Value,
    assumptions: Vec<String>,
    version: &'static str,
}

/// Writes `rows` with the given header. Every row must have the header's length.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::Contract(format!(
                "row has {} fields, header has {}",
                r.len(),
                header.len()
            )));
        }
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Float formatting used in all tables (shortest round-trip form).
pub fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

pub fn write_metadata(dir: &Path, cfg: &RunConfig, experiment: &str) -> Result<PathBuf> {
    let meta = Metadata {
        experiment,
        digest: cfg.digest()?,
        seeds: cfg.seeds(),
        config: serde_json::to_value(cfg)?,
        assumptions: cfg.assumptions(),
        version: env!("CARGO_PKG_VERSION"),
    };
    let path = dir.join("metadata.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(path)
}

pub fn write_timing(dir: &Path, timings: &BTreeMap<String, Duration>) -> Result<PathBuf> {
    let secs: BTreeMap<&str, f64> = timings.iter().map(|(k, v)| (k.as_str(), v.as_secs_f64())).collect();
    let path = dir.join("timing.json");
    fs::write(&path, serde_json::to_string_pretty(&secs)? + "\n")?;
    Ok(path)
}

/// Runs `id` and writes its outputs into `dir`, which must exist.
pub fn run_experiment(id: &str, cfg: &RunConfig, dir: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let mut files = vec![write_metadata(dir, cfg, id)?];
    let headline = match id {
        "cost_per_success" => metrics::write_reference_table(dir, &mut files)?,
        "dps_bias" => {
            let r = bias::run_dps_bias_study(cfg)?;
            files.push(r.write(dir)?);
            serde_json::to_value(&r.summary)?
        }
        "unbiasedness" => {
            let r = unbiased::run_unbiasedness_study(cfg)?;
            files.push(r.write(dir)?);
            serde_json::to_value(&r.rows)?
        }
        "variance_decay" => {
            let r = variance::run_variance_decay_study(cfg)?;
            files.extend(r.write(dir)?);
            serde_json::to_value(&r.fit)?
        }
        "guidance" => {
            let r = benchmark::run_guidance_benchmark(cfg)?;
            files.extend(r.write(dir)?);
            r.headline()
        }
        "rare_event" => {
            let r = benchmark::run_rare_event_benchmark(cfg)?;
            files.extend(r.write(dir)?);
            r.headline()
        }
        "schedule_sweep" => {
            let r = benchmark::run_schedule_sweep(cfg)?;
            files.extend(r.write(dir)?);
            r.headline()
        }
        "ess_trace" => {
            let r = ess::run_ess_trace_study(cfg)?;
            files.extend(r.write(dir)?);
            serde_json::to_value(&r.summary)?
        }
        "posterior" => {
            let r = posterior::run_posterior_panels(cfg)?;
            files.extend(r.write(dir)?);
            serde_json::json!({ "panels": r.panels.len() })
        }
        other => return Err(Error::config("experiment", format!("unknown experiment `{other}`"))),
    };
    Ok(ExperimentSummary {
        experiment: id.to_string(),
        digest: cfg.digest()?,
        files,
        headline,
    })
}
