//! Particle sampler for conditional generation.
//!
//! Particles start from `N(0, I)` at `t = T` and move down one reverse step
//! at a time under a proposal kernel. At scheduled steps every particle gets
//! a fresh marginal-likelihood estimate `L_new` and its log-weight grows by
//!
//! ```text
//! log L_new - log L_cached + sum of log[p(x_{s-1} | x_s) / r(x_{s-1} | x_s)]
//! ```
//!
//! over the moves since the previous weighting. Particles are then resampled
//! (always, or when the ESS drops below a threshold) and the cached estimate
//! is replaced by `L_new`. With the unconditional proposal the transition
//! ratio is exactly 1 and the weight is a ratio of likelihood estimates.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::Estimator;
use crate::gmm::GmmModel;
use crate::likelihood::Likelihood;
use crate::reverse::{reverse_mean, GuidedScore, NoiseLevel};
use crate::rng::{Purpose, StreamKey};
use crate::schedule::DiffusionSchedule;
use crate::stats::log_sum_exp;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMethod {
    Multinomial,
    #[default]
    Systematic,
}

/// When weights are computed and when particles are resampled.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleSchedule {
    /// Loop steps `t` (the move `t -> t-1`) after which particles are weighted
    /// and resampled. Sorted in decreasing order.
    pub steps: Vec<usize>,
    pub method: ResampleMethod,
    /// Resample only when `ESS < threshold * N`.
    pub adaptive_threshold: Option<f64>,
    /// Weight after every move (ESS monitoring). Resampling still happens
    /// only at `steps`.
    pub monitor_every_step: bool,
    /// `false` disables resampling altogether.
    pub resample: bool,
}

impl ResampleSchedule {
    pub fn new(mut steps: Vec<usize>, method: ResampleMethod) -> Self {
        steps.sort_unstable_by(|a, b| b.cmp(a));
        steps.dedup();
        Self {
            steps,
            method,
            adaptive_threshold: None,
            monitor_every_step: false,
            resample: true,
        }
    }

    /// Weights at every step, never resamples.
    pub fn monitor_only() -> Self {
        Self {
            steps: Vec::new(),
            method: ResampleMethod::Systematic,
            adaptive_threshold: None,
            monitor_every_step: true,
            resample: false,
        }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if let Some(bad) = self.steps.iter().find(|s| **s < 1 || **s > total_steps) {
            return Err(Error::config(
                "smc.resample_steps",
                format!("step {bad} outside [1, {total_steps}]"),
            ));
        }
        if let Some(th) = self.adaptive_threshold {
            if !(th > 0.0 && th <= 1.0) {
                return Err(Error::config("smc.adaptive_threshold", "must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    fn weighs_at(&self, t: usize) -> bool {
        self.monitor_every_step || self.steps.contains(&t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Proposal {
    Unconditional,
    /// Point-estimate guided kernel with the given guidance scale.
    Guided { guidance_scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    /// Current diffusion step of every state.
    pub t: usize,
    pub states: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
    /// `log L` from the last weighting (0 initially).
    pub cached_log_lik: Vec<f64>,
    /// Transition log-ratios accumulated since the last weighting.
    pub pending_correction: Vec<f64>,
    pub epoch: u32,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn ess(&self) -> Result<f64> {
        ess(&self.log_weights)
    }

    /// Normalized weights.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let lse = log_sum_exp(&self.log_weights);
        if lse == f64::NEG_INFINITY {
            return Err(Error::AllInfeasible {
                t: self.t,
                infeasible: vec![true; self.len()],
            });
        }
        Ok(self.log_weights.iter().map(|w| (w - lse).exp()).collect())
    }
}

/// `(sum w)^2 / sum w^2`, computed from log-weights.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    let lse = log_sum_exp(log_weights);
    if lse == f64::NEG_INFINITY || log_weights.is_empty() {
        return Err(Error::Contract("ESS undefined: no particle has positive weight".into()));
    }
    let sum_sq: f64 = log_weights.iter().map(|w| (2.0 * (w - lse)).exp()).sum();
    Ok(1.0 / sum_sq)
}

/// `N` standard-normal states at `t = T`.
pub fn init_particles(n: usize, dim: usize, t: usize, seed: u64) -> Result<ParticleSet> {
    if n < 1 {
        return Err(Error::config("smc.N", "need at least one particle"));
    }
    let states = (0..n)
        .map(|i| {
            let mut rng = StreamKey::new(seed, Purpose::Init).particle(i as u64).rng();
            (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    Ok(ParticleSet {
        t,
        states,
        log_weights: vec![0.0; n],
        cached_log_lik: vec![0.0; n],
        pending_correction: vec![0.0; n],
        epoch: 0,
    })
}

/// Ancestor indices, in ascending order.
pub fn resample_indices<R: Rng + ?Sized>(weights: &[f64], method: ResampleMethod, rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    let points: Vec<f64> = match method {
        ResampleMethod::Systematic => {
            let u: f64 = rng.random::<f64>() / n as f64;
            (0..n).map(|j| u + j as f64 / n as f64).collect()
        }
        ResampleMethod::Multinomial => {
            let mut u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            u.sort_by(|a, b| a.total_cmp(b));
            u
        }
    };
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for p in points {
        while k < n - 1 && (cdf[k] <= p || weights[k] == 0.0) {
            k += 1;
        }
        // skip trailing zero-weight particles
        while weights[k] == 0.0 && k > 0 {
            k -= 1;
        }
        out.push(k);
    }
    out
}

/// Moves every particle one reverse step `t -> t-1` and returns the
/// per-particle log proposal corrections `log p(x'|x) - log r(x'|x)`.
pub fn propagate(
    set: &mut ParticleSet,
    proposal: &Proposal,
    model: &GmmModel,
    likelihood: &Likelihood,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<(Vec<f64>, usize)> {
    let t = set.t;
    if t < 1 {
        return Err(Error::Contract("cannot propagate past t = 0".into()));
    }
    let tr = schedule.transition(t as f64, (t - 1) as f64);
    let guided = match proposal {
        Proposal::Guided { guidance_scale } if *guidance_scale != 0.0 && tr.variance > 0.0 => {
            Some((GuidedScore::new(model, model, likelihood, *guidance_scale)?, *guidance_scale))
        }
        _ => None,
    };
    let sd = tr.variance.sqrt();
    let epoch = set.epoch;
    let results: Vec<Result<(Vec<f64>, f64)>> = set
        .states
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut noise = StreamKey::new(seed, Purpose::Propagate)
                .particle(i as u64)
                .epoch(epoch)
                .step(t as u32)
                .noise(x.len());
            let e = noise.next_vec();
            let base_mean = reverse_mean(model, &tr, x).map_err(|err| err.with_particle(i))?;
            let Some((g, scale)) = &guided else {
                let out: Vec<f64> = base_mean.iter().zip(&e).map(|(m, z)| m + sd * z).collect();
                return Ok((out, 0.0));
            };
            let level = NoiseLevel {
                t: tr.from,
                alpha_bar: tr.alpha_bar_from,
            };
            let grad = g.guidance(level, x).map_err(|err| err.with_particle(i))?;
            let shift = tr.beta() / tr.alpha.sqrt() * scale;
            let guided_mean: Vec<f64> = base_mean.iter().zip(&grad).map(|(m, gi)| m + shift * gi).collect();
            let out: Vec<f64> = guided_mean.iter().zip(&e).map(|(m, z)| m + sd * z).collect();
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    t: t as f64,
                    particle: Some(i),
                });
            }
            let d_r: f64 = out.iter().zip(&guided_mean).map(|(a, b)| (a - b).powi(2)).sum();
            let d_p: f64 = out.iter().zip(&base_mean).map(|(a, b)| (a - b).powi(2)).sum();
            Ok((out, (d_r - d_p) / (2.0 * tr.variance)))
        })
        .collect();
    let mut corrections = Vec::with_capacity(set.len());
    for (i, r) in results.into_iter().enumerate() {
        let (x, c) = r?;
        set.states[i] = x;
        set.pending_correction[i] += c;
        corrections.push(c);
    }
    set.t = t - 1;
    let per_particle = if guided.is_some() { 2 } else { 1 };
    Ok((corrections, per_particle * set.len()))
}

/// Outcome of one weighting.
#[derive(Clone, Debug, PartialEq)]
pub struct WeighOutcome {
    pub ess_before: f64,
    pub resampled: bool,
    pub nfe: usize,
    pub clamped: usize,
    pub min_log_weight: f64,
    pub max_log_weight: f64,
}

/// Estimates fresh likelihoods, updates weights and resamples if `resample`.
#[allow(clippy::too_many_arguments)]
pub fn weigh_and_resample(
    set: &mut ParticleSet,
    estimator: &Estimator,
    model: &GmmModel,
    likelihood: &Likelihood,
    schedule: &DiffusionSchedule,
    method: ResampleMethod,
    resample_policy: ResamplePolicy,
    seed: u64,
) -> Result<WeighOutcome> {
    let t = set.t;
    let epoch = set.epoch;
    let estimates: Vec<Result<_>> = set
        .states
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let key = StreamKey::new(seed, Purpose::Estimate)
                .particle(i as u64)
                .epoch(epoch)
                .step(t as u32);
            estimator.estimate(model, model, schedule, likelihood, t, x, key)
        })
        .collect();
    let mut new_log = Vec::with_capacity(set.len());
    let mut nfe = 0;
    let mut clamped = 0;
    for e in estimates {
        let e = e?;
        nfe += e.n_oracle_calls;
        clamped += e.clamped as usize;
        new_log.push(e.log_value);
    }
    apply_weights(set, &new_log);
    let infeasible: Vec<bool> = set.log_weights.iter().map(|w| *w == f64::NEG_INFINITY).collect();
    if infeasible.iter().all(|b| *b) {
        return Err(Error::AllInfeasible { t, infeasible });
    }
    let ess_before = ess(&set.log_weights)?;
    let finite = set.log_weights.iter().copied().filter(|w| w.is_finite());
    let (min_log_weight, max_log_weight) =
        finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), w| (lo.min(w), hi.max(w)));
    let n = set.len() as f64;
    let do_resample = match resample_policy {
        ResamplePolicy::Never => false,
        ResamplePolicy::Always => true,
        ResamplePolicy::BelowEss(frac) => ess_before < frac * n,
    };
    if do_resample {
        let weights = set.weights()?;
        let mut rng = StreamKey::new(seed, Purpose::Resample).epoch(epoch).step(t as u32).rng();
        let ancestors = resample_indices(&weights, method, &mut rng);
        set.states = ancestors.iter().map(|a| set.states[*a].clone()).collect();
        set.cached_log_lik = ancestors.iter().map(|a| set.cached_log_lik[*a]).collect();
        set.log_weights = vec![0.0; set.len()];
        set.epoch += 1;
    }
    Ok(WeighOutcome {
        ess_before,
        resampled: do_resample,
        nfe,
        clamped,
        min_log_weight,
        max_log_weight,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ResamplePolicy {
    Never,
    Always,
    BelowEss(f64),
}

/// Adds `new - cached + pending` to each log-weight and refreshes the cache.
fn apply_weights(set: &mut ParticleSet, new_log: &[f64]) {
    let slots = set
        .log_weights
        .iter_mut()
        .zip(set.cached_log_lik.iter_mut())
        .zip(set.pending_correction.iter_mut());
    for (((w, cached), pending), new) in slots.zip(new_log) {
        if *w == f64::NEG_INFINITY || *new == f64::NEG_INFINITY {
            *w = f64::NEG_INFINITY;
        } else {
            *w += new - *cached + *pending;
        }
        *cached = *new;
        *pending = 0.0;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub ess: f64,
    pub epoch: u32,
    pub min_log_weight: f64,
    pub max_log_weight: f64,
    pub nfe_cumulative: usize,
    pub resampled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub n_particles: usize,
    pub resampling: ResampleSchedule,
    pub proposal: Proposal,
    pub estimator: Estimator,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SamplerOutput {
    pub particles: ParticleSet,
    /// One row per weighting, with ESS measured before resampling.
    pub trace: Vec<TraceRow>,
    pub nfe: usize,
    pub clamped_estimates: usize,
    pub wall_time: Duration,
}

/// Runs the full sampler from `t = T` to `t = 0`.
pub fn run_sampler(
    model: &GmmModel,
    schedule: &DiffusionSchedule,
    likelihood: &Likelihood,
    config: &SamplerConfig,
) -> Result<SamplerOutput> {
    let start = Instant::now();
    let total = schedule.steps();
    config.resampling.validate(total)?;
    if likelihood.dim() != model.dim() {
        return Err(Error::Shape {
            expected: model.dim(),
            found: likelihood.dim(),
        });
    }
    if matches!(config.proposal, Proposal::Guided { .. }) && !likelihood.is_differentiable() {
        return Err(Error::Contract(
            "guided proposal needs a differentiable likelihood or a smoothing length".into(),
        ));
    }
    let mut set = init_particles(config.n_particles, model.dim(), total, config.seed)?;
    let mut trace = Vec::new();
    let mut nfe = 0;
    let mut clamped = 0;
    let rs = &config.resampling;
    for t in (1..=total).rev() {
        let (_, calls) = propagate(&mut set, &config.proposal, model, likelihood, schedule, config.seed)?;
        nfe += calls;
        if !rs.weighs_at(t) {
            continue;
        }
        let policy = if !rs.resample || !rs.steps.contains(&t) {
            ResamplePolicy::Never
        } else if let Some(th) = rs.adaptive_threshold {
            ResamplePolicy::BelowEss(th)
        } else {
            ResamplePolicy::Always
        };
        let epoch = set.epoch;
        let out = weigh_and_resample(&mut set, &config.estimator, model, likelihood, schedule, rs.method, policy, config.seed)?;
        nfe += out.nfe;
        clamped += out.clamped;
        trace.push(TraceRow {
            t,
            ess: out.ess_before,
            epoch,
            min_log_weight: out.min_log_weight,
            max_log_weight: out.max_log_weight,
            nfe_cumulative: nfe,
            resampled: out.resampled,
        });
    }
    Ok(SamplerOutput {
        particles: set,
        trace,
        nfe,
        clamped_estimates: clamped,
        wall_time: start.elapsed(),
    })
}

/// Picks `count` resampling steps from a monitoring run's ESS trace.
///
/// The window opens at the largest `t` whose ESS is below `upper * N` and
/// closes where the ESS first comes within 5% of `N` times its final
/// fraction. Steps are spread evenly across the window.
pub fn suggest_schedule(trace: &[TraceRow], n: usize, count: usize, upper: f64) -> Vec<usize> {
    if trace.is_empty() || count == 0 {
        return Vec::new();
    }
    let n = n as f64;
    let final_ess = trace.last().map(|r| r.ess).unwrap_or(n);
    let open = trace.iter().find(|r| r.ess < upper * n).map(|r| r.t);
    let Some(open) = open else {
        return Vec::new();
    };
    let close = trace
        .iter()
        .filter(|r| r.t <= open)
        .find(|r| r.ess <= final_ess + 0.05 * n)
        .map(|r| r.t)
        .unwrap_or(1)
        .max(1);
    if count == 1 || open == close {
        return vec![open];
    }
    let mut steps: Vec<usize> = (0..count)
        .map(|i| {
            let f = i as f64 / (count - 1) as f64;
            (open as f64 - f * (open - close) as f64).round() as usize
        })
        .collect();
    steps.dedup();
    steps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ess_examples() {
        assert!((ess(&[0.0; 7]).unwrap() - 7.0).abs() < 1e-12);
        let one_hot = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
        assert!((ess(&one_hot).unwrap() - 1.0).abs() < 1e-12);
        let w = [(2.0f64 / 3.0).ln(), (1.0f64 / 3.0).ln()];
        assert!((ess(&w).unwrap() - 1.8).abs() < 1e-12);
        assert!(ess(&[f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn systematic_uniform_keeps_everyone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let idx = resample_indices(&[0.25; 4], ResampleMethod::Systematic, &mut rng);
            assert_eq!(idx, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn one_hot_copies_survivor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for method in [ResampleMethod::Systematic, ResampleMethod::Multinomial] {
            let idx = resample_indices(&[0.0, 0.0, 1.0, 0.0], method, &mut rng);
            assert_eq!(idx, vec![2; 4]);
            let idx = resample_indices(&[1.0, 0.0, 0.0], method, &mut rng);
            assert_eq!(idx, vec![0; 3]);
        }
    }

    #[test]
    fn init_is_uniform() {
        let set = init_particles(1, 2, 100, 0).unwrap();
        assert_eq!(set.ess().unwrap(), 1.0);
        let set = init_particles(5, 2, 100, 0).unwrap();
        assert!(set.cached_log_lik.iter().all(|v| *v == 0.0));
        assert!(init_particles(0, 2, 100, 0).is_err());
    }

    #[test]
    fn unconditional_corrections_are_zero() {
        let s = make_linear_schedule(50, 1e-3, 0.2).unwrap();
        let m = GmmModel::ring(8, 4.0, 1.0).unwrap();
        let l = Likelihood::classifier(m.clone(), 0, 1.0).unwrap();
        let mut set = init_particles(8, 2, 50, 1).unwrap();
        let (c, nfe) = propagate(&mut set, &Proposal::Unconditional, &m, &l, &s, 1).unwrap();
        assert!(c.iter().all(|v| *v == 0.0));
        assert_eq!(nfe, 8);
        let (c, _) = propagate(&mut set, &Proposal::Guided { guidance_scale: 0.0 }, &m, &l, &s, 1).unwrap();
        assert!(c.iter().all(|v| *v == 0.0));
        assert_eq!(set.t, 48);
    }

    #[test]
    fn schedule_validation() {
        let rs = ResampleSchedule::new(vec![30, 60, 40, 50], ResampleMethod::Systematic);
        assert_eq!(rs.steps, vec![60, 50, 40, 30]);
        assert!(rs.validate(100).is_ok());
        let bad = ResampleSchedule::new(vec![0, 10], ResampleMethod::Systematic);
        assert!(bad.validate(100).is_err());
        let mut th = ResampleSchedule::new(vec![10], ResampleMethod::Systematic);
        th.adaptive_threshold = Some(1.5);
        assert!(th.validate(100).is_err());
    }

    #[test]
    fn suggest_schedule_picks_collapse_window() {
        let rows: Vec<TraceRow> = (1..=100)
            .rev()
            .map(|t| {
                let ess = if t > 70 {
                    32.0
                } else if t > 20 {
                    32.0 - (70 - t) as f64 * 0.55
                } else {
                    4.5
                };
                TraceRow {
                    t,
                    ess,
                    epoch: 0,
                    min_log_weight: 0.0,
                    max_log_weight: 0.0,
                    nfe_cumulative: 0,
                    resampled: false,
                }
            })
            .collect();
        let steps = suggest_schedule(&rows, 32, 5, 0.95);
        assert_eq!(steps.first(), Some(&67));
        assert!(steps.iter().all(|s| (20..=70).contains(s)));
        assert_eq!(steps.len(), 5);
    }
}
