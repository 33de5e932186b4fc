//! Run configuration.
//!
//! Configs are TOML files carrying a `config_version` key. Parsing checks
//! syntax and types; [`RunConfig::validate`] then collects every semantic
//! violation with its field path before anything is computed. The digest is
//! a SHA-256 over the canonical JSON form of the validated config, framed
//! like a git blob (`blob <len>\0<bytes>`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, Violation};
use crate::estimators::{Estimator, MlmcPlan};
use crate::gmm::GmmModel;
use crate::likelihood::{Likelihood, Region};
use crate::schedule::{make_linear_schedule, DiffusionSchedule, ReverseVariance};
use crate::smc::{Proposal, ResampleMethod, ResampleSchedule, SamplerConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Names accepted by `experiment = "..."`.
pub const EXPERIMENTS: &[&str] = &[
    "cost_per_success",
    "dps_bias",
    "unbiasedness",
    "variance_decay",
    "guidance",
    "rare_event",
    "ess_trace",
    "posterior",
    "schedule_sweep",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    #[serde(default)]
    pub experiment: Option<String>,
    /// Base seed; replicate `i` uses `seed + i`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::replicates")]
    pub replicates: usize,
    /// Cost model for reported times: seconds charged per oracle call.
    #[serde(default = "defaults::seconds_per_nfe")]
    pub seconds_per_nfe: f64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub model: ModelSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub likelihood: LikelihoodSpec,
    #[serde(default = "defaults::proposal")]
    pub proposal: Proposal,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub smc: SmcSpec,
    #[serde(default)]
    pub dps_bias: DpsBiasSpec,
    #[serde(default)]
    pub unbiasedness: UnbiasednessSpec,
    #[serde(default)]
    pub variance: VarianceSpec,
    #[serde(default)]
    pub benchmark: BenchmarkSpec,
    #[serde(default)]
    pub rare_event: RareEventSpec,
    #[serde(default)]
    pub ess: EssSpec,
    #[serde(default)]
    pub posterior: PosteriorSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub pilot: PilotSpec,
}

mod defaults {
    use crate::smc::Proposal;

    pub fn replicates() -> usize {
        1
    }
    pub fn seconds_per_nfe() -> f64 {
        1e-3
    }
    pub fn proposal() -> Proposal {
        Proposal::Unconditional
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn components() -> usize {
        8
    }
    pub fn radius() -> f64 {
        8.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `K` equal-weight components on a circle of radius `R` in two dimensions.
    Ring {
        #[serde(rename = "K", default = "defaults::components")]
        components: usize,
        #[serde(rename = "R", default = "defaults::radius")]
        radius: f64,
        #[serde(default = "defaults::one")]
        sigma0_sq: f64,
    },
    /// Two equal-weight components at `+mu` and `-mu`.
    Symmetric {
        mu: Vec<f64>,
        #[serde(default = "defaults::one")]
        sigma0_sq: f64,
    },
    Explicit {
        means: Vec<Vec<f64>>,
        #[serde(default = "defaults::one")]
        sigma0_sq: f64,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
}

impl ModelSpec {
    pub fn build(&self) -> Result<GmmModel> {
        match self {
            ModelSpec::Ring {
                components,
                radius,
                sigma0_sq,
            } => GmmModel::ring(*components, *radius, *sigma0_sq),
            ModelSpec::Symmetric { mu, sigma0_sq } => GmmModel::symmetric(mu.clone(), *sigma0_sq),
            ModelSpec::Explicit {
                means,
                sigma0_sq,
                weights,
            } => GmmModel::new(means.clone(), *sigma0_sq, weights.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default)]
    pub reverse_var_mode: ReverseVariance,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.2,
            reverse_var_mode: ReverseVariance::Posterior,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        Ok(make_linear_schedule(self.steps, self.beta_min, self.beta_max)?.with_mode(self.reverse_var_mode))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LikelihoodSpec {
    Classifier {
        target_class: usize,
        #[serde(default = "defaults::one")]
        temperature: f64,
    },
    /// Centred at `center`, or at the mean of `target_class` if no center is given.
    Gaussian {
        #[serde(default)]
        center: Option<Vec<f64>>,
        #[serde(default)]
        target_class: Option<usize>,
        omega_sq: f64,
    },
    Indicator {
        region: Region,
        #[serde(default)]
        smoothing: Option<f64>,
        /// Class used for membership-based success; defaults to the
        /// component nearest the region.
        #[serde(default)]
        target_class: Option<usize>,
    },
}

impl LikelihoodSpec {
    pub fn build(&self, model: &GmmModel) -> Result<Likelihood> {
        let lik = match self {
            LikelihoodSpec::Classifier {
                target_class,
                temperature,
            } => Likelihood::classifier(model.clone(), *target_class, *temperature)?,
            LikelihoodSpec::Gaussian {
                center,
                target_class,
                omega_sq,
            } => {
                let c = match (center, target_class) {
                    (Some(c), _) => c.clone(),
                    (None, Some(k)) => model
                        .means()
                        .get(*k)
                        .cloned()
                        .ok_or_else(|| Error::config("likelihood.target_class", "out of range"))?,
                    (None, None) => {
                        return Err(Error::config("likelihood.center", "give a center or a target_class"))
                    }
                };
                Likelihood::gaussian(c, *omega_sq)?
            }
            LikelihoodSpec::Indicator { region, smoothing, .. } => Likelihood::indicator(region.clone(), *smoothing)?,
        };
        if lik.dim() != model.dim() {
            return Err(Error::config(
                "likelihood",
                format!("dimension {} does not match model dimension {}", lik.dim(), model.dim()),
            ));
        }
        Ok(lik)
    }

    /// The mixture component that counts as a success.
    pub fn target_class(&self, model: &GmmModel) -> usize {
        match self {
            LikelihoodSpec::Classifier { target_class, .. } => *target_class,
            LikelihoodSpec::Gaussian {
                target_class: Some(k), ..
            } => *k,
            LikelihoodSpec::Gaussian { center, .. } => nearest_component(model, center.as_deref().unwrap_or(&[])),
            LikelihoodSpec::Indicator {
                target_class: Some(k), ..
            } => *k,
            LikelihoodSpec::Indicator { region, .. } => {
                let c = match region {
                    Region::Box { lower, upper } => lower.iter().zip(upper).map(|(a, b)| 0.5 * (a + b)).collect(),
                    Region::Ball { center, .. } => center.clone(),
                };
                nearest_component(model, &c)
            }
        }
    }
}

fn nearest_component(model: &GmmModel, x: &[f64]) -> usize {
    model
        .means()
        .iter()
        .enumerate()
        .map(|(k, m)| (k, m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicT0 {
    pub max_t: f64,
    #[serde(rename = "T0")]
    pub base_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    Dps,
    GaussianMc {
        samples: usize,
        kernel_var: f64,
    },
    NaiveMc {
        samples: usize,
        #[serde(default)]
        steps: Option<usize>,
    },
    /// `L` counts levels, so `N` must have `L` entries.
    Mlmc {
        #[serde(rename = "T0")]
        base_steps: usize,
        #[serde(rename = "M")]
        refinement: usize,
        #[serde(rename = "L", default)]
        levels: Option<usize>,
        #[serde(rename = "N")]
        n_samples: Vec<usize>,
        #[serde(rename = "dynamic_T0", default)]
        dynamic: Vec<DynamicT0>,
    },
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        EstimatorSpec::Mlmc {
            base_steps: 4,
            refinement: 2,
            levels: Some(3),
            n_samples: vec![8, 4, 2],
            dynamic: Vec::new(),
        }
    }
}

impl EstimatorSpec {
    pub fn build(&self) -> Result<Estimator> {
        Ok(match self {
            EstimatorSpec::Dps => Estimator::Dps,
            EstimatorSpec::GaussianMc { samples, kernel_var } => Estimator::GaussianMc {
                samples: *samples,
                kernel_var: *kernel_var,
            },
            EstimatorSpec::NaiveMc { samples, steps } => Estimator::NaiveMc {
                samples: *samples,
                steps: *steps,
            },
            EstimatorSpec::Mlmc { .. } => Estimator::Mlmc(self.plan()?.expect("mlmc spec")),
        })
    }

    pub fn plan(&self) -> Result<Option<MlmcPlan>> {
        let EstimatorSpec::Mlmc {
            base_steps,
            refinement,
            n_samples,
            dynamic,
            ..
        } = self
        else {
            return Ok(None);
        };
        let mut plan = MlmcPlan::new(*base_steps, *refinement, n_samples.clone())?;
        for d in dynamic {
            plan = plan.with_dynamic_base(d.max_t, d.base_steps);
        }
        plan.validate()?;
        Ok(Some(plan))
    }

    fn check(&self, prefix: &str, out: &mut Vec<Violation>) {
        let mut push = |f: &str, m: &str| {
            out.push(Violation {
                field: format!("{prefix}.{f}"),
                message: m.to_string(),
            })
        };
        match self {
            EstimatorSpec::Dps => {}
            EstimatorSpec::GaussianMc { samples, kernel_var } => {
                if *samples < 1 {
                    push("samples", "must be at least 1");
                }
                if !(*kernel_var > 0.0) {
                    push("kernel_var", "must be positive");
                }
            }
            EstimatorSpec::NaiveMc { samples, steps } => {
                if *samples < 1 {
                    push("samples", "must be at least 1");
                }
                if *steps == Some(0) {
                    push("steps", "must be at least 1");
                }
            }
            EstimatorSpec::Mlmc {
                base_steps,
                refinement,
                levels,
                n_samples,
                dynamic,
            } => {
                if *base_steps < 1 {
                    push("T0", "must be at least 1");
                }
                if *refinement < 2 {
                    push("M", "must be at least 2");
                }
                if n_samples.is_empty() {
                    push("N", "need at least one level");
                }
                if n_samples.contains(&0) {
                    push("N", "sample counts must be at least 1");
                }
                if let Some(l) = levels {
                    if *l != n_samples.len() {
                        push("L", &format!("L = {l} but N lists {} levels", n_samples.len()));
                    }
                }
                for (i, d) in dynamic.iter().enumerate() {
                    if d.base_steps < 1 {
                        push(&format!("dynamic_T0[{i}].T0"), "must be at least 1");
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcSpec {
    #[serde(rename = "N")]
    pub particles: usize,
    pub resample_steps: Vec<usize>,
    #[serde(default)]
    pub method: ResampleMethod,
    #[serde(default)]
    pub adaptive_threshold: Option<f64>,
}

impl Default for SmcSpec {
    fn default() -> Self {
        Self {
            particles: 16,
            resample_steps: vec![60, 50, 40, 30],
            method: ResampleMethod::Systematic,
            adaptive_threshold: None,
        }
    }
}

impl SmcSpec {
    pub fn resample_schedule(&self) -> ResampleSchedule {
        let mut rs = ResampleSchedule::new(self.resample_steps.clone(), self.method);
        rs.adaptive_threshold = self.adaptive_threshold;
        rs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpsBiasSpec {
    pub points: usize,
    /// Standard deviation of the random `x_t` draws.
    pub spread: f64,
    /// Posterior draws per point for the Monte Carlo cross-check of the
    /// membership truth (0 disables it).
    pub mc_samples: usize,
}

impl Default for DpsBiasSpec {
    fn default() -> Self {
        Self {
            points: 1000,
            spread: 2.0,
            mc_samples: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnbiasednessSpec {
    pub replicates: usize,
    pub t: usize,
    pub x_t: Vec<f64>,
    pub naive_samples: usize,
    /// Samples of the reference integrator on the finest grid.
    pub oracle_samples: usize,
}

impl Default for UnbiasednessSpec {
    fn default() -> Self {
        Self {
            replicates: 200,
            t: 40,
            x_t: vec![0.3, -0.2],
            naive_samples: 4,
            oracle_samples: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceSpec {
    pub pairs: usize,
    /// Finest level index studied; levels run from 0 to `max_level`.
    pub max_level: usize,
    pub t: usize,
    pub x_t: Vec<f64>,
    pub bootstrap: usize,
    /// Target variance of the cost comparison, as a fraction of the squared
    /// fine-level mean.
    pub relative_tolerance: f64,
}

impl Default for VarianceSpec {
    fn default() -> Self {
        Self {
            pairs: 10_000,
            max_level: 3,
            t: 40,
            x_t: vec![0.3, -0.2],
            bootstrap: 1000,
            relative_tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub gaussian_mc: EstimatorSpec,
    pub naive_mc: EstimatorSpec,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            gaussian_mc: EstimatorSpec::GaussianMc {
                samples: 16,
                kernel_var: 1.0,
            },
            naive_mc: EstimatorSpec::NaiveMc {
                samples: 8,
                steps: Some(16),
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RareEventSpec {
    /// Prior-sample budget of the SIR baseline; 0 matches the mean NFE of
    /// the guided sampler.
    pub sir_budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EssSpec {
    pub runs: usize,
    /// Estimator used for per-step weighting.
    pub monitor: EstimatorSpec,
}

impl Default for EssSpec {
    fn default() -> Self {
        Self {
            runs: 3,
            monitor: EstimatorSpec::NaiveMc {
                samples: 8,
                steps: Some(8),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorSpec {
    /// Noise steps of the panels.
    pub t: Vec<usize>,
    /// Observed `x_t` per panel; defaults to a forward draw from the target component.
    pub x_t: Vec<Vec<f64>>,
    pub grid: usize,
    pub extent: f64,
}

impl Default for PosteriorSpec {
    fn default() -> Self {
        Self {
            t: vec![90, 60],
            x_t: Vec::new(),
            grid: 121,
            extent: 12.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// Candidate schedules; each is run with the configured sampler.
    pub schedules: Vec<Vec<usize>>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            schedules: vec![vec![], vec![40], vec![50, 30], vec![60, 40, 20], vec![60, 50, 40, 30]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PilotSpec {
    pub estimator: EstimatorSpec,
    /// Number of resampling steps to suggest.
    pub suggest: usize,
    /// The window opens once ESS drops below this fraction of `N`.
    pub threshold: f64,
}

impl Default for PilotSpec {
    fn default() -> Self {
        Self {
            estimator: EstimatorSpec::NaiveMc {
                samples: 4,
                steps: Some(8),
            },
            suggest: 4,
            threshold: 0.9,
        }
    }
}

/// Fully built objects for one run.
pub struct Resolved {
    pub model: GmmModel,
    pub schedule: DiffusionSchedule,
    pub likelihood: Likelihood,
    pub estimator: Estimator,
    pub target_class: usize,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| format!("byte {}..{}", s.start, s.end))
                .unwrap_or_else(|| "<file>".to_string());
            Error::config(field, e.message().to_string())
        })?;
        Ok(cfg)
    }

    /// Reads, parses and validates `path`.
    pub fn parse_and_validate(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_toml_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// All violations at once, or `Ok`.
    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |field: &str, message: String| {
            out.push(Violation {
                field: field.to_string(),
                message,
            })
        };
        if self.config_version != CONFIG_VERSION {
            push(
                "config_version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.config_version),
            );
        }
        if let Some(e) = &self.experiment {
            if !EXPERIMENTS.contains(&e.as_str()) {
                push("experiment", format!("unknown experiment `{e}`"));
            }
        }
        if self.replicates < 1 {
            push("replicates", "must be at least 1".into());
        }
        if !(self.seconds_per_nfe > 0.0) {
            push("seconds_per_nfe", "must be positive".into());
        }

        let model = self.model.build();
        if let Err(e) = &model {
            for mut v in e.violations().into_iter().chain(contract_violation(e)) {
                v.field = prefix_field("model", &v.field);
                push(&v.field, v.message);
            }
        }
        let schedule = self.schedule.build();
        if let Err(e) = &schedule {
            for v in e.violations() {
                push(&prefix_field("schedule", &v.field), v.message);
            }
        }
        if let Ok(model) = &model {
            if let Err(e) = self.likelihood.build(model) {
                for v in e.violations().into_iter().chain(contract_violation(&e)) {
                    push(&prefix_field("likelihood", &v.field), v.message);
                }
            }
            if let (LikelihoodSpec::Indicator { smoothing: None, .. }, Proposal::Guided { .. }) =
                (&self.likelihood, &self.proposal)
            {
                push(
                    "likelihood.smoothing",
                    "a guided proposal needs a smoothing length for indicator likelihoods".into(),
                );
            }
            if let LikelihoodSpec::Indicator {
                target_class: Some(k), ..
            } = self.likelihood
            {
                if k >= model.components() {
                    push("likelihood.target_class", format!("class {k} out of range"));
                }
            }
        }
        if let Proposal::Guided { guidance_scale } = self.proposal {
            if !guidance_scale.is_finite() || guidance_scale < 0.0 {
                push("proposal.guidance_scale", "must be finite and non-negative".into());
            }
        }

        let mut est = Vec::new();
        self.estimator.check("estimator", &mut est);
        self.benchmark.gaussian_mc.check("benchmark.gaussian_mc", &mut est);
        self.benchmark.naive_mc.check("benchmark.naive_mc", &mut est);
        self.ess.monitor.check("ess.monitor", &mut est);
        self.pilot.estimator.check("pilot.estimator", &mut est);
        for v in est {
            push(&v.field, v.message);
        }

        let total = self.schedule.steps;
        if self.smc.particles < 1 {
            push("smc.N", "need at least one particle".into());
        }
        if let Some(bad) = self.smc.resample_steps.iter().find(|s| **s < 1 || **s > total) {
            push(
                "smc.resample_steps",
                format!("step {bad} outside [1, {total}]"),
            );
        }
        if let Some(th) = self.smc.adaptive_threshold {
            if !(th > 0.0 && th <= 1.0) {
                push("smc.adaptive_threshold", "must lie in (0, 1]".into());
            }
        }

        if self.dps_bias.points < 1 {
            push("dps_bias.points", "must be at least 1".into());
        }
        if !(self.dps_bias.spread > 0.0) {
            push("dps_bias.spread", "must be positive".into());
        }
        let dim = model.as_ref().map(|m| m.dim()).ok();
        let ub = &self.unbiasedness;
        if ub.replicates < 2 {
            push("unbiasedness.replicates", "need at least two replicates".into());
        }
        if ub.t < 1 || ub.t > total {
            push("unbiasedness.t", format!("must lie in [1, {total}]"));
        }
        if ub.naive_samples < 1 || ub.oracle_samples < 2 {
            push("unbiasedness.oracle_samples", "need positive sample counts".into());
        }
        if dim.is_some_and(|d| d != ub.x_t.len()) {
            push("unbiasedness.x_t", "dimension does not match the model".into());
        }
        let va = &self.variance;
        if va.pairs < 2 {
            push("variance.pairs", "need at least two pairs".into());
        }
        if va.t < 1 || va.t > total {
            push("variance.t", format!("must lie in [1, {total}]"));
        }
        if dim.is_some_and(|d| d != va.x_t.len()) {
            push("variance.x_t", "dimension does not match the model".into());
        }
        if !(va.relative_tolerance > 0.0) {
            push("variance.relative_tolerance", "must be positive".into());
        }
        if self.ess.runs < 1 {
            push("ess.runs", "must be at least 1".into());
        }
        if self.posterior.grid < 2 || !(self.posterior.extent > 0.0) {
            push("posterior.grid", "need at least 2 points and a positive extent".into());
        }
        if self.posterior.t.iter().any(|t| *t < 1 || *t > total) {
            push("posterior.t", format!("steps must lie in [1, {total}]"));
        }
        if !self.posterior.x_t.is_empty() && self.posterior.x_t.len() != self.posterior.t.len() {
            push("posterior.x_t", "need one point per panel".into());
        }
        for (i, s) in self.sweep.schedules.iter().enumerate() {
            if s.iter().any(|t| *t < 1 || *t > total) {
                push(&format!("sweep.schedules[{i}]"), format!("steps must lie in [1, {total}]"));
            }
        }
        if !(self.pilot.threshold > 0.0 && self.pilot.threshold <= 1.0) {
            push("pilot.threshold", "must lie in (0, 1]".into());
        }
        out
    }

    /// Builds model, schedule, likelihood and estimator. Call after `validate`.
    pub fn resolve(&self) -> Result<Resolved> {
        let model = self.model.build()?;
        let schedule = self.schedule.build()?;
        let likelihood = self.likelihood.build(&model)?;
        let estimator = self.estimator.build()?;
        let target_class = self.likelihood.target_class(&model);
        Ok(Resolved {
            model,
            schedule,
            likelihood,
            estimator,
            target_class,
        })
    }

    pub fn sampler_config(&self, estimator: Estimator, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_particles: self.smc.particles,
            resampling: self.smc.resample_schedule(),
            proposal: self.proposal.clone(),
            estimator,
            seed,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    /// Canonical JSON used for hashing and metadata.
    pub fn canonical_json(&self) -> Result<String> {
        // serde_json::Value sorts object keys, which gives a stable order
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&value)?)
    }

    /// Hex SHA-256 over `blob <len>\0<canonical json>`.
    pub fn digest(&self) -> Result<String> {
        let body = self.canonical_json()?;
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    /// Notes recorded in run metadata about values the config fills in.
    pub fn assumptions(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if let EstimatorSpec::Mlmc { refinement, .. } = &self.estimator {
            notes.push(format!("MLMC refinement factor M = {refinement} (not fixed by the reference configuration)"));
        }
        notes
    }
}

fn contract_violation(e: &Error) -> Option<Violation> {
    match e {
        Error::Config { .. } | Error::Validation(_) => None,
        other => Some(Violation {
            field: String::new(),
            message: other.to_string(),
        }),
    }
}

fn prefix_field(prefix: &str, field: &str) -> String {
    if field.is_empty() {
        prefix.to_string()
    } else if field.starts_with(prefix) {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}
