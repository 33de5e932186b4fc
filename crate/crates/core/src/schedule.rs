//! Discrete noise schedule and the nested time grids used by the multilevel
//! estimators.
//!
//! Step indices run `0..=T` with `alpha_bar(0) = 1`. Multilevel grids need
//! more steps than there are integer indices below a resampling time, so the
//! schedule is also evaluated at fractional times by interpolating
//! `log alpha_bar` linearly between neighbouring integers. At integer times the
//! interpolation is exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Choice of the injected reverse-kernel variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    #[default]
    Posterior,
    /// `beta_t`.
    Forward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    /// Index 0 holds the `alpha_bar = 1` convention.
    alpha_bars: Vec<f64>,
    log_alpha_bars: Vec<f64>,
    mode: ReverseVariance,
}

/// Coefficients of one reverse move between two (possibly fractional) times.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub from: f64,
    pub to: f64,
    pub alpha_bar_from: f64,
    pub alpha_bar_to: f64,
    /// `alpha_bar_from / alpha_bar_to`, the effective single-step alpha.
    pub alpha: f64,
    /// Injected variance of the reverse kernel.
    pub variance: f64,
}

impl Transition {
    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }
}

/// Builds a schedule with betas linearly spaced from `beta_min` to `beta_max`.
pub fn make_linear_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::config("schedule.T", format!("need at least 2 steps, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min < 1.0) {
        return Err(Error::config(
            "schedule.beta_min",
            format!("must lie in (0, 1), got {beta_min}"),
        ));
    }
    if !(beta_max >= beta_min && beta_max < 1.0) {
        return Err(Error::config(
            "schedule.beta_max",
            format!("must lie in [beta_min, 1), got {beta_max}"),
        ));
    }
    let betas = (0..steps)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
        .collect();
    DiffusionSchedule::from_betas(betas, ReverseVariance::Posterior)
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>, mode: ReverseVariance) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule.T", "empty schedule"));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config(
                "schedule.beta",
                format!("beta_{} = {b} outside (0, 1)", i + 1),
            ));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        let mut log_alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        log_alpha_bars.push(0.0);
        let mut log_acc = 0.0;
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            log_acc += (-b).ln_1p();
            alpha_bars.push(acc);
            log_alpha_bars.push(log_acc);
        }
        Ok(Self {
            betas,
            alpha_bars,
            log_alpha_bars,
            mode,
        })
    }

    pub fn with_mode(mut self, mode: ReverseVariance) -> Self {
        self.mode = mode;
        self
    }

    pub fn mode(&self) -> ReverseVariance {
        self.mode
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `alpha_bar_0 ..= alpha_bar_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `alpha_bar` at a continuous time in `[0, T]`.
    pub fn alpha_bar_at(&self, s: f64) -> f64 {
        let t_max = self.steps() as f64;
        let s = s.clamp(0.0, t_max);
        let lo = s.floor() as usize;
        let frac = s - lo as f64;
        if frac == 0.0 {
            return self.alpha_bars[lo];
        }
        let log_ab = (1.0 - frac) * self.log_alpha_bars[lo] + frac * self.log_alpha_bars[lo + 1];
        log_ab.exp()
    }

    /// Posterior variance `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]) * self.betas[t - 1]
    }

    /// `sigma_t^2` of the single-step reverse kernel `t -> t-1`.
    pub fn reverse_variance(&self, t: usize) -> f64 {
        self.transition(t as f64, (t - 1) as f64).variance
    }

    /// Coefficients for a reverse move `from -> to` with `from > to`.
    ///
    /// No noise is injected on a move that lands on time 0.
    pub fn transition(&self, from: f64, to: f64) -> Transition {
        debug_assert!(from > to);
        let alpha_bar_from = self.alpha_bar_at(from);
        let alpha_bar_to = self.alpha_bar_at(to);
        let alpha = alpha_bar_from / alpha_bar_to;
        let beta = 1.0 - alpha;
        let variance = if to <= 0.0 {
            0.0
        } else {
            match self.mode {
                ReverseVariance::Posterior => (1.0 - alpha_bar_to) / (1.0 - alpha_bar_from) * beta,
                ReverseVariance::Forward => beta,
            }
        };
        Transition {
            from,
            to,
            alpha_bar_from,
            alpha_bar_to,
            alpha,
            variance,
        }
    }
}

/// A strictly decreasing list of times from a start time down to 0.
///
/// A level-`l` grid has `base_steps * refinement^l` steps. Its coarser
/// neighbour is obtained by keeping every `refinement`-th time.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelGrid {
    level: usize,
    refinement: usize,
    times: Vec<f64>,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a
}

/// Equally spaced times `t_start * (n - j) / n`, j = 0..=n.
///
/// Each fraction is reduced first, so the same rational time produces the
/// same float in every grid that contains it.
pub fn equispaced_times(t_start: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|j| {
            let num = (n - j) as u64;
            let den = n as u64;
            let g = gcd(num, den).max(1);
            t_start * (num / g) as f64 / (den / g) as f64
        })
        .collect()
}

/// Grid at `level` with `base_steps * refinement^level` steps from `t_start` to 0.
pub fn make_level_grid(
    schedule: &DiffusionSchedule,
    t_start: f64,
    base_steps: usize,
    refinement: usize,
    level: usize,
) -> Result<LevelGrid> {
    if base_steps < 1 {
        return Err(Error::config("plan.T0", "base step count must be at least 1"));
    }
    if refinement < 2 {
        return Err(Error::config("plan.M", format!("refinement must be at least 2, got {refinement}")));
    }
    if !(t_start > 0.0 && t_start <= schedule.steps() as f64) {
        return Err(Error::config(
            "grid.t_start",
            format!("start time {t_start} outside (0, {}]", schedule.steps()),
        ));
    }
    let n = refinement
        .checked_pow(level as u32)
        .and_then(|f| f.checked_mul(base_steps))
        .ok_or_else(|| Error::config("plan.L", "level grid size overflows"))?;
    Ok(LevelGrid {
        level,
        refinement,
        times: equispaced_times(t_start, n),
    })
}

impl LevelGrid {
    /// Builds a grid from explicit times (strictly decreasing, ending at 0).
    /// Accepts `refinement = 1`, the degenerate self-coupling.
    pub fn from_times(times: Vec<f64>, level: usize, refinement: usize) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Contract("grid needs at least one step".into()));
        }
        if times.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::Contract("grid times must be strictly decreasing".into()));
        }
        if *times.last().unwrap() != 0.0 {
            return Err(Error::Contract("grid must end at time 0".into()));
        }
        if refinement < 1 {
            return Err(Error::Contract("refinement must be at least 1".into()));
        }
        Ok(Self {
            level,
            refinement,
            times,
        })
    }

    /// Uniform grid of `steps` steps from `t_start`, tagged as level 0.
    pub fn uniform(t_start: f64, steps: usize) -> Result<Self> {
        if steps < 1 || !(t_start > 0.0) {
            return Err(Error::config("grid", "uniform grid needs steps >= 1 and t_start > 0"));
        }
        Self::from_times(equispaced_times(t_start, steps), 0, 2)
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn refinement(&self) -> usize {
        self.refinement
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// The level-`(l-1)` grid: every `refinement`-th time of this one.
    pub fn coarsen(&self) -> Result<LevelGrid> {
        if self.level == 0 {
            return Err(Error::Contract("level-0 grid has no coarser grid".into()));
        }
        if !self.steps().is_multiple_of(self.refinement) {
            return Err(Error::Contract("grid steps not divisible by refinement".into()));
        }
        Ok(LevelGrid {
            level: self.level - 1,
            refinement: self.refinement,
            times: self.times.iter().copied().step_by(self.refinement).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_beta_product() {
        let s = make_linear_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5, 0.25]);
        assert_eq!(s.alpha(1), 0.5);
    }

    #[test]
    fn default_schedule_ends_near_standard_normal() {
        let s = make_linear_schedule(100, 1e-4, 0.2).unwrap();
        // direct product, independent of the cumulative loop
        let direct: f64 = (0..100)
            .map(|i| 1.0 - (1e-4 + (0.2 - 1e-4) * i as f64 / 99.0))
            .product();
        assert!((s.alpha_bar(100) - direct).abs() < 1e-15);
        assert!(s.alpha_bar(100) < 0.05);
    }

    #[test]
    fn invalid_ranges_name_the_field() {
        match make_linear_schedule(1, 0.0, 0.1) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "schedule.T"),
            other => panic!("unexpected {other:?}"),
        }
        match make_linear_schedule(10, 0.0, 0.1) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "schedule.beta_min"),
            other => panic!("unexpected {other:?}"),
        }
        match make_linear_schedule(10, 0.2, 0.1) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "schedule.beta_max"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn monotone_and_posterior_variance_bounded() {
        let s = make_linear_schedule(100, 1e-4, 0.2).unwrap();
        for t in 1..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            let pv = s.posterior_variance(t);
            assert!(pv <= s.beta(t));
            if t >= 2 {
                assert!(pv > 0.0);
            }
        }
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn single_step_transition_matches_integer_coefficients() {
        let s = make_linear_schedule(100, 1e-4, 0.2).unwrap();
        for t in 2..=100 {
            let tr = s.transition(t as f64, (t - 1) as f64);
            assert!((tr.alpha - s.alpha(t)).abs() < 1e-12);
            assert!((tr.variance - s.posterior_variance(t)).abs() < 1e-12);
        }
        let fwd = s.clone().with_mode(ReverseVariance::Forward);
        assert!((fwd.reverse_variance(10) - s.beta(10)).abs() < 1e-12);
        assert_eq!(fwd.reverse_variance(1), 0.0);
    }

    #[test]
    fn fractional_alpha_bar_interpolates_between_neighbours() {
        let s = make_linear_schedule(100, 1e-4, 0.2).unwrap();
        let mid = s.alpha_bar_at(37.5);
        assert!(mid < s.alpha_bar(37) && mid > s.alpha_bar(38));
        assert!((mid - (s.alpha_bar(37) * s.alpha_bar(38)).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identity_stride_grid() {
        let s = make_linear_schedule(100, 1e-4, 0.2).unwrap();
        let g = make_level_grid(&s, 16.0, 16, 2, 0).unwrap();
        let expect: Vec<f64> = (0..=16).rev().map(|t| t as f64).collect();
        assert_eq!(g.times(), expect.as_slice());
    }

    #[test]
    fn level_one_grid_contains_level_zero_grid() {
        let s = make_linear_schedule(100, 1e-4, 0.2).unwrap();
        let fine = make_level_grid(&s, 16.0, 4, 2, 1).unwrap();
        let coarse = make_level_grid(&s, 16.0, 4, 2, 0).unwrap();
        assert_eq!(fine.steps(), 8);
        let even: Vec<f64> = fine.times().iter().copied().step_by(2).collect();
        assert_eq!(even, coarse.times());
        assert_eq!(coarse.times(), &[16.0, 12.0, 8.0, 4.0, 0.0]);
    }

    #[test]
    fn dynamic_schedule_grid_has_four_steps() {
        let s = make_linear_schedule(100, 1e-4, 0.2).unwrap();
        let g = make_level_grid(&s, 50.0, 4, 2, 0).unwrap();
        assert_eq!(g.steps(), 4);
        assert_eq!(g.start(), 50.0);
        assert_eq!(*g.times().last().unwrap(), 0.0);
    }

    #[test]
    fn nesting_holds_for_awkward_starts() {
        let s = make_linear_schedule(100, 1e-4, 0.2).unwrap();
        for t_start in [1.0, 7.0, 30.0, 59.0, 60.0, 99.0] {
            for (t0, m) in [(4, 2), (16, 2), (3, 3), (5, 4)] {
                for level in 1..=3 {
                    let fine = make_level_grid(&s, t_start, t0, m, level).unwrap();
                    let coarse = make_level_grid(&s, t_start, t0, m, level - 1).unwrap();
                    assert_eq!(fine.coarsen().unwrap(), coarse);
                    assert_eq!(fine.steps(), t0 * m.pow(level as u32));
                }
            }
        }
    }

    #[test]
    fn grid_errors() {
        let s = make_linear_schedule(100, 1e-4, 0.2).unwrap();
        assert!(make_level_grid(&s, 16.0, 0, 2, 0).is_err());
        assert!(make_level_grid(&s, 16.0, 4, 1, 0).is_err());
        assert!(make_level_grid(&s, 0.0, 4, 2, 0).is_err());
        let g = make_level_grid(&s, 16.0, 4, 2, 0).unwrap();
        assert!(g.coarsen().is_err());
    }
}
