//! Sign of the point-estimate bias on a symmetric two-component mixture.
//!
//! With `p(y | x_0)` the exact membership of the target component, the true
//! marginal likelihood `p(y | x_t)` is the membership at noise level `t`,
//! and the point estimate evaluates the clean membership at `E[x_0 | x_t]`.
//! The estimate exceeds the truth exactly when `x_t` lies on the target side
//! of the separating hyperplane.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::estimators::estimate_dps;
use crate::gmm::GmmModel;
use crate::likelihood::Likelihood;
use crate::rng::{Purpose, StreamKey};
use crate::stats::{mean, std_error};

use super::{fmt, write_table};

#[derive(Clone, Debug, Serialize)]
pub struct BiasRow {
    pub point: usize,
    pub t: usize,
    pub x_t: Vec<f64>,
    /// `x_t . mu_target`.
    pub projection: f64,
    pub true_prob: f64,
    pub dps_estimate: f64,
    pub sign_agreement: bool,
    pub mc_prob: Option<f64>,
    pub mc_se: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BiasSummary {
    pub points: usize,
    pub sign_agreements: usize,
    /// Points where the Monte Carlo truth check ran and landed within 3 SE.
    pub mc_checked: usize,
    pub mc_within_3se: usize,
}

#[derive(Clone, Debug)]
pub struct BiasStudy {
    pub rows: Vec<BiasRow>,
    pub summary: BiasSummary,
}

impl BiasStudy {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let header = [
            "point",
            "t",
            "projection",
            "true_prob",
            "dps_estimate",
            "sign_agreement",
            "mc_prob",
            "mc_se",
        ];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.point.to_string(),
                    r.t.to_string(),
                    fmt(r.projection),
                    fmt(r.true_prob),
                    fmt(r.dps_estimate),
                    (r.sign_agreement as u8).to_string(),
                    r.mc_prob.map(fmt).unwrap_or_default(),
                    r.mc_se.map(fmt).unwrap_or_default(),
                ]
            })
            .collect();
        let path = dir.join("dps_bias.csv");
        write_table(&path, &header, &rows)?;
        Ok(path)
    }
}

fn check_symmetric(model: &GmmModel) -> Result<()> {
    let m = model.means();
    let symmetric = m.len() == 2
        && m[0].iter().zip(&m[1]).all(|(a, b)| a == &-b)
        && model.weights()[0] == model.weights()[1];
    if symmetric {
        Ok(())
    } else {
        Err(Error::config(
            "model",
            "the bias study needs a symmetric two-component mixture",
        ))
    }
}

/// Compares truth and point estimate at `cfg.dps_bias.points` random `(t, x_t)`.
pub fn run_dps_bias_study(cfg: &RunConfig) -> Result<BiasStudy> {
    let model = cfg.model.build()?;
    check_symmetric(&model)?;
    let schedule = cfg.schedule.build()?;
    let target = cfg.likelihood.target_class(&model);
    let lik = Likelihood::classifier(model.clone(), target, 1.0)?;
    let spec = &cfg.dps_bias;
    let mu = model.means()[target].clone();
    let steps = schedule.steps();

    let rows: Vec<Result<BiasRow>> = (0..spec.points)
        .into_par_iter()
        .map(|i| {
            let mut rng = StreamKey::new(cfg.seed, Purpose::Study).sample(i as u32).rng();
            let t = rng.random_range(1..=steps);
            let x_t: Vec<f64> = (0..model.dim())
                .map(|_| spec.spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let ab = schedule.alpha_bar(t);
            let true_prob = model.membership_prob(ab, &x_t, target)?;
            let dps_estimate = estimate_dps(&model, &schedule, &lik, t, &x_t)?.value;
            let projection: f64 = x_t.iter().zip(&mu).map(|(a, b)| a * b).sum();
            let diff_sign = (dps_estimate - true_prob).partial_cmp(&0.0).map(|o| o as i8);
            let proj_sign = projection.partial_cmp(&0.0).map(|o| o as i8);
            let (mc_prob, mc_se) = if spec.mc_samples > 1 {
                let post = model.denoising_posterior(ab, &x_t)?;
                let vals: Vec<f64> = (0..spec.mc_samples).map(|_| lik.likelihood(&post.sample(&mut rng))).collect();
                (Some(mean(&vals)), Some(std_error(&vals)))
            } else {
                (None, None)
            };
            Ok(BiasRow {
                point: i,
                t,
                x_t,
                projection,
                true_prob,
                dps_estimate,
                sign_agreement: diff_sign.is_some() && diff_sign == proj_sign,
                mc_prob,
                mc_se,
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let mc: Vec<&BiasRow> = rows.iter().filter(|r| r.mc_prob.is_some()).collect();
    let summary = BiasSummary {
        points: rows.len(),
        sign_agreements: rows.iter().filter(|r| r.sign_agreement).count(),
        mc_checked: mc.len(),
        mc_within_3se: mc
            .iter()
            .filter(|r| {
                let (p, se) = (r.mc_prob.unwrap(), r.mc_se.unwrap());
                (p - r.true_prob).abs() <= 3.0 * se.max(1e-12)
            })
            .count(),
    };
    Ok(BiasStudy { rows, summary })
}
