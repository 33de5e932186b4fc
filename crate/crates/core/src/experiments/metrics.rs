//! Cost-per-success: the expected cost of obtaining at least one valid
//! sample with a given confidence from independent runs that each succeed
//! with probability `p`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::{fmt, write_table};

/// Independent runs needed so that at least one succeeds with probability
/// `confidence`. `None` when `p = 0`.
pub fn runs_needed(p: f64, confidence: f64) -> Result<Option<u64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config("success_prob", format!("{p} outside [0, 1]")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::config("confidence", format!("{confidence} outside (0, 1)")));
    }
    if p == 0.0 {
        return Ok(None);
    }
    if p >= confidence {
        return Ok(Some(1));
    }
    let runs = ((1.0 - confidence).ln() / (1.0 - p).ln()).ceil();
    Ok(Some(runs as u64))
}

/// `per_run_cost * runs_needed(p)`, or `inf` when `p = 0`.
pub fn cost_per_success(p: f64, per_run_cost: f64, confidence: f64) -> Result<f64> {
    if !(per_run_cost > 0.0) {
        return Err(Error::config("per_run_cost", "must be positive"));
    }
    Ok(match runs_needed(p, confidence)? {
        Some(n) => per_run_cost * n as f64,
        None => f64::INFINITY,
    })
}

/// Reference rows: (label, success probability, seconds per run).
pub const REFERENCE_ROWS: [(&str, f64, f64); 4] = [
    ("heuristic_guidance", 0.52, 13.7),
    ("smc_mlmc", 0.956, 23.4),
    ("class_a", 0.41, 12.0),
    ("class_b", 0.08, 12.0),
];

pub(super) fn write_reference_table(dir: &Path, files: &mut Vec<PathBuf>) -> Result<serde_json::Value> {
    let mut rows = Vec::new();
    let mut out = serde_json::Map::new();
    for (label, p, c) in REFERENCE_ROWS {
        let cps = cost_per_success(p, c, 0.95)?;
        rows.push(vec![label.to_string(), fmt(p), String::new(), fmt(c), fmt(cps)]);
        out.insert(label.to_string(), serde_json::json!(cps));
    }
    let path = dir.join("report.csv");
    write_table(&path, &super::REPORT_HEADER, &rows)?;
    files.push(path);
    Ok(serde_json::Value::Object(out))
}
