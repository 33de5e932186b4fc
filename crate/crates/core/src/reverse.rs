//! Reverse-time integrators.
//!
//! A reverse move `from -> to` uses the DDPM Gaussian kernel with the
//! effective single-step coefficients of the pair of times:
//!
//! ```text
//! alpha = abar(from) / abar(to)
//! mean  = (x + (1 - alpha) * score(x, from)) / sqrt(alpha)
//! x'    = mean + sqrt(var) * noise
//! ```
//!
//! which is the epsilon-parameterised mean with `eps = -sqrt(1 - abar) * score`.
//! With consecutive integer times this is the ordinary one-step kernel.

use crate::error::{check_dim, Error, Result};
use crate::gmm::GmmModel;
use crate::likelihood::Likelihood;
use crate::rng::NoiseStream;
use crate::schedule::{DiffusionSchedule, LevelGrid, Transition};

/// Time and `alpha_bar` at which a score is requested.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevel {
    pub t: f64,
    pub alpha_bar: f64,
}

/// Anything that can supply `grad_x log q_t(x)`.
pub trait ScoreOracle: Sync {
    fn dim(&self) -> usize;

    fn score(&self, level: NoiseLevel, x: &[f64]) -> Result<Vec<f64>>;

    /// Function evaluations charged per call.
    fn cost(&self) -> usize {
        1
    }
}

impl ScoreOracle for GmmModel {
    fn dim(&self) -> usize {
        GmmModel::dim(self)
    }

    fn score(&self, level: NoiseLevel, x: &[f64]) -> Result<Vec<f64>> {
        GmmModel::score(self, level.alpha_bar, x)
    }
}

/// Base score plus `scale * grad_x log p(y | E[x_0 | x])`, the point-estimate
/// guidance term differentiated through the analytic posterior mean.
pub struct GuidedScore<'a, O: ScoreOracle> {
    base: &'a O,
    model: &'a GmmModel,
    likelihood: &'a Likelihood,
    scale: f64,
}

impl<'a, O: ScoreOracle> GuidedScore<'a, O> {
    pub fn new(base: &'a O, model: &'a GmmModel, likelihood: &'a Likelihood, scale: f64) -> Result<Self> {
        if !likelihood.is_differentiable() {
            return Err(Error::Contract(
                "guided proposal needs a differentiable likelihood or a smoothing length".into(),
            ));
        }
        Ok(Self {
            base,
            model,
            likelihood,
            scale,
        })
    }

    /// The guidance term alone, before scaling.
    pub fn guidance(&self, level: NoiseLevel, x: &[f64]) -> Result<Vec<f64>> {
        let mean = self.model.posterior_mean(level.alpha_bar, x)?;
        let g = self.likelihood.surrogate_grad(&mean)?;
        self.model.posterior_mean_vjp(level.alpha_bar, x, &g)
    }
}

impl<O: ScoreOracle> ScoreOracle for GuidedScore<'_, O> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn score(&self, level: NoiseLevel, x: &[f64]) -> Result<Vec<f64>> {
        let mut s = self.base.score(level, x)?;
        if self.scale != 0.0 {
            let g = self.guidance(level, x)?;
            for (si, gi) in s.iter_mut().zip(g) {
                *si += self.scale * gi;
            }
        }
        Ok(s)
    }

    fn cost(&self) -> usize {
        // score plus one gradient of the guidance term
        self.base.cost() + 1
    }
}

/// Mean of the reverse kernel for the move described by `tr`.
pub fn reverse_mean<O: ScoreOracle + ?Sized>(oracle: &O, tr: &Transition, x: &[f64]) -> Result<Vec<f64>> {
    let level = NoiseLevel {
        t: tr.from,
        alpha_bar: tr.alpha_bar_from,
    };
    let s = oracle.score(level, x)?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            t: tr.from,
            particle: None,
        });
    }
    let beta = tr.beta();
    let inv = 1.0 / tr.alpha.sqrt();
    Ok(x.iter().zip(&s).map(|(xi, si)| inv * (xi + beta * si)).collect())
}

/// One reverse move `from -> to` driven by the given standard-normal noise.
pub fn reverse_move<O: ScoreOracle + ?Sized>(
    oracle: &O,
    schedule: &DiffusionSchedule,
    from: f64,
    to: f64,
    x: &[f64],
    noise: &[f64],
) -> Result<Vec<f64>> {
    check_dim(oracle.dim(), x.len())?;
    check_dim(oracle.dim(), noise.len())?;
    let tr = schedule.transition(from, to);
    let mean = reverse_mean(oracle, &tr, x)?;
    let sd = tr.variance.sqrt();
    let out: Vec<f64> = mean.iter().zip(noise).map(|(m, e)| m + sd * e).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { t: from, particle: None });
    }
    Ok(out)
}

/// The single-step kernel `x_t -> x_{t-1}`.
pub fn reverse_step<O: ScoreOracle + ?Sized>(
    oracle: &O,
    schedule: &DiffusionSchedule,
    t: usize,
    x_t: &[f64],
    noise: &[f64],
) -> Result<Vec<f64>> {
    if t < 1 {
        return Err(Error::Contract("reverse step needs t >= 1".into()));
    }
    reverse_move(oracle, schedule, t as f64, (t - 1) as f64, x_t, noise)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub x0: Vec<f64>,
    pub n_oracle_calls: usize,
}

/// Runs the reverse chain along `grid`, one noise vector per step.
pub fn denoise_trajectory<O: ScoreOracle + ?Sized>(
    oracle: &O,
    schedule: &DiffusionSchedule,
    grid: &LevelGrid,
    x_start: &[f64],
    stream: &mut NoiseStream,
) -> Result<Trajectory> {
    let mut x = x_start.to_vec();
    for w in grid.times().windows(2) {
        let noise = stream.next_vec();
        x = reverse_move(oracle, schedule, w[0], w[1], &x, &noise)?;
    }
    Ok(Trajectory {
        x0: x,
        n_oracle_calls: grid.steps() * oracle.cost(),
    })
}

/// Endpoints of a fine trajectory and its synchronously coupled coarse twin.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledPair {
    pub x0_fine: Vec<f64>,
    pub x0_coarse: Vec<f64>,
    pub n_oracle_calls: usize,
}

/// Simulates the level-`l` trajectory on `grid_fine` and the level-`(l-1)`
/// trajectory on its coarsening from the same start, sharing noise.
///
/// The fine path consumes the stream exactly as [`denoise_trajectory`] would.
/// Each coarse step uses `sum_i sqrt(v_i) e_i / sqrt(sum_i v_i)` built from
/// the noises `e_i` and injected variances `v_i` of the fine steps it spans,
/// which is again standard normal.
pub fn coupled_denoise<O: ScoreOracle + ?Sized>(
    oracle: &O,
    schedule: &DiffusionSchedule,
    grid_fine: &LevelGrid,
    x_start: &[f64],
    stream: &mut NoiseStream,
) -> Result<CoupledPair> {
    if grid_fine.level() == 0 {
        return Err(Error::Contract("coupled sampling needs a grid of level >= 1".into()));
    }
    let m = grid_fine.refinement();
    let times = grid_fine.times();
    if !grid_fine.steps().is_multiple_of(m) {
        return Err(Error::Contract("grid steps not divisible by refinement".into()));
    }
    let d = x_start.len();
    let mut fine = x_start.to_vec();
    let mut coarse = x_start.to_vec();
    for block in 0..grid_fine.steps() / m {
        let mut agg = vec![0.0; d];
        let mut total_var = 0.0;
        for i in 0..m {
            let (from, to) = (times[block * m + i], times[block * m + i + 1]);
            let noise = stream.next_vec();
            let v = schedule.transition(from, to).variance;
            let sv = v.sqrt();
            for (a, e) in agg.iter_mut().zip(&noise) {
                *a += sv * e;
            }
            total_var += v;
            fine = reverse_move(oracle, schedule, from, to, &fine, &noise)?;
        }
        let coarse_noise: Vec<f64> = if total_var > 0.0 {
            let n = total_var.sqrt();
            agg.iter().map(|a| a / n).collect()
        } else {
            vec![0.0; d]
        };
        let (from, to) = (times[block * m], times[(block + 1) * m]);
        coarse = reverse_move(oracle, schedule, from, to, &coarse, &coarse_noise)?;
    }
    Ok(CoupledPair {
        x0_fine: fine,
        x0_coarse: coarse,
        n_oracle_calls: (grid_fine.steps() + grid_fine.steps() / m) * oracle.cost(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};
    use crate::schedule::{make_level_grid, make_linear_schedule, ReverseVariance};

    fn setup() -> (DiffusionSchedule, GmmModel) {
        (
            make_linear_schedule(100, 1e-4, 0.2).unwrap(),
            GmmModel::symmetric(vec![2.0, 0.0], 0.5).unwrap(),
        )
    }

    struct ZeroScore(usize);

    impl ScoreOracle for ZeroScore {
        fn dim(&self) -> usize {
            self.0
        }
        fn score(&self, _: NoiseLevel, _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0; self.0])
        }
    }

    struct NanScore;

    impl ScoreOracle for NanScore {
        fn dim(&self) -> usize {
            1
        }
        fn score(&self, _: NoiseLevel, _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![f64::NAN])
        }
    }

    #[test]
    fn zero_score_step_rescales() {
        let (s, _) = setup();
        let x = [1.0, -2.0];
        let out = reverse_step(&ZeroScore(2), &s.clone().with_mode(ReverseVariance::Forward), 10, &x, &[0.0, 0.0]).unwrap();
        let a = s.alpha(10).sqrt();
        assert!((out[0] - 1.0 / a).abs() < 1e-14 && (out[1] + 2.0 / a).abs() < 1e-14);
    }

    #[test]
    fn final_posterior_step_is_deterministic() {
        let (s, m) = setup();
        let x = [0.3, 0.1];
        let a = reverse_step(&m, &s, 1, &x, &[5.0, -5.0]).unwrap();
        let b = reverse_step(&m, &s, 1, &x, &[0.0, 0.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_score_is_reported() {
        let s = make_linear_schedule(10, 1e-3, 0.1).unwrap();
        let err = reverse_step(&NanScore, &s, 5, &[0.0], &[0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { t, .. } if t == 5.0));
    }

    #[test]
    fn trajectory_counts_calls_and_consumes_one_noise_per_step() {
        let (s, m) = setup();
        let g = LevelGrid::uniform(1.0, 1).unwrap();
        let mut st = StreamKey::new(1, Purpose::Estimate).noise(2);
        let tr = denoise_trajectory(&m, &s, &g, &[0.1, 0.2], &mut st).unwrap();
        assert_eq!(tr.n_oracle_calls, 1);
        assert_eq!(st.drawn(), 1);

        let g = make_level_grid(&s, 40.0, 4, 2, 2).unwrap();
        let mut st = StreamKey::new(1, Purpose::Estimate).noise(2);
        let tr = denoise_trajectory(&m, &s, &g, &[0.1, 0.2], &mut st).unwrap();
        assert_eq!(tr.n_oracle_calls, 16);
        assert_eq!(st.drawn(), 16);
    }

    #[test]
    fn coupled_fine_path_equals_plain_trajectory() {
        let (s, m) = setup();
        let g = make_level_grid(&s, 50.0, 4, 2, 2).unwrap();
        let key = StreamKey::new(3, Purpose::Estimate).sample(9);
        let pair = coupled_denoise(&m, &s, &g, &[0.5, -0.4], &mut key.noise(2)).unwrap();
        let plain = denoise_trajectory(&m, &s, &g, &[0.5, -0.4], &mut key.noise(2)).unwrap();
        assert_eq!(pair.x0_fine, plain.x0);
        assert_eq!(pair.n_oracle_calls, 16 + 8);
    }

    #[test]
    fn degenerate_refinement_couples_exactly() {
        let (s, m) = setup();
        let times: Vec<f64> = (0..=20).rev().map(|t| t as f64).collect();
        let g = LevelGrid::from_times(times, 1, 1).unwrap();
        let pair = coupled_denoise(&m, &s, &g, &[0.5, -0.4], &mut StreamKey::new(3, Purpose::Estimate).noise(2)).unwrap();
        assert_eq!(pair.x0_fine, pair.x0_coarse);
    }

    #[test]
    fn coupled_rejects_level_zero() {
        let (s, m) = setup();
        let g = make_level_grid(&s, 50.0, 4, 2, 0).unwrap();
        assert!(coupled_denoise(&m, &s, &g, &[0.0, 0.0], &mut StreamKey::new(3, Purpose::Estimate).noise(2)).is_err());
    }

    #[test]
    fn zero_scale_guidance_is_base_score() {
        let (s, m) = setup();
        let lik = Likelihood::classifier(m.clone(), 0, 1.0).unwrap();
        let guided = GuidedScore::new(&m, &m, &lik, 0.0).unwrap();
        let lvl = NoiseLevel {
            t: 30.0,
            alpha_bar: s.alpha_bar(30),
        };
        let x = [0.4, 1.1];
        assert_eq!(guided.score(lvl, &x).unwrap(), m.score(lvl.alpha_bar, &x).unwrap());
    }

    #[test]
    fn guidance_requires_differentiable_likelihood() {
        let (_, m) = setup();
        let lik = Likelihood::indicator(
            crate::likelihood::Region::Ball {
                center: vec![0.0, 0.0],
                radius: 1.0,
            },
            None,
        )
        .unwrap();
        assert!(GuidedScore::new(&m, &m, &lik, 1.0).is_err());
    }

    #[test]
    fn determinism() {
        let (s, m) = setup();
        let g = make_level_grid(&s, 60.0, 16, 2, 1).unwrap();
        let key = StreamKey::new(11, Purpose::Estimate).particle(4).epoch(2).level(1).sample(3);
        let a = denoise_trajectory(&m, &s, &g, &[1.0, 1.0], &mut key.noise(2)).unwrap();
        let b = denoise_trajectory(&m, &s, &g, &[1.0, 1.0], &mut key.noise(2)).unwrap();
        assert_eq!(a.x0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.x0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
