mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smc_guide::estimators::{estimate_mlmc, estimate_naive_mc, Estimator, MlmcPlan};
use smc_guide::experiments::benchmark::classified_as;
use smc_guide::experiments::unbiased::reference_integral;
use smc_guide::rng::{Purpose, StreamKey};
use smc_guide::schedule::{make_level_grid, make_linear_schedule};
use smc_guide::smc::{
    init_particles, propagate, resample_indices, run_sampler, weigh_and_resample, ResampleMethod, ResamplePolicy,
    ResampleSchedule, SamplerConfig,
};
use smc_guide::stats::{mean, sample_variance};
use smc_guide::{GmmModel, Likelihood, Region};

use common::*;

#[test]
fn posterior_matches_quadrature_of_joint() {
    let model = GmmModel::ring(8, 8.0, 1.0).unwrap();
    let schedule = make_linear_schedule(100, 1e-4, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (t, ab, x_t) = random_state(&model, schedule.alpha_bars(), &mut rng);
        let gap = posterior_gap(&model, ab, &x_t, 20, &mut rng);
        assert!(gap < 1e-6, "t={t} x_t={x_t:?} gap={gap:e}");
    }
}

#[test]
fn posterior_matches_quadrature_with_unequal_weights_and_width() {
    let model = GmmModel::new(vec![vec![2.0, -1.0], vec![-3.0, 0.5], vec![0.0, 4.0]], 0.5, Some(vec![0.2, 0.5, 0.3])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for ab in [0.999, 0.9, 0.5, 0.1, 0.01] {
        let x_t = model.sample_marginal(ab, &mut rng);
        let gap = posterior_gap(&model, ab, &x_t, 20, &mut rng);
        assert!(gap < 1e-6, "abar={ab} gap={gap:e}");
    }
}

#[test]
fn score_matches_finite_differences() {
    let model = GmmModel::ring(8, 8.0, 1.0).unwrap();
    let schedule = make_linear_schedule(100, 1e-4, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let (t, ab, x) = random_state(&model, schedule.alpha_bars(), &mut rng);
        let gap = score_fd_gap(&model, ab, &x);
        assert!(gap < 1e-5, "t={t} x={x:?} gap={gap:e}");
    }
}

#[test]
fn tweedie_identity_holds() {
    let model = GmmModel::new(vec![vec![1.0, 2.0], vec![-2.0, 0.0]], 0.7, Some(vec![0.4, 0.6])).unwrap();
    let schedule = make_linear_schedule(100, 1e-4, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let (t, ab, x) = random_state(&model, schedule.alpha_bars(), &mut rng);
        let gap = tweedie_gap(&model, ab, &x);
        assert!(gap < 1e-10, "t={t} gap={gap:e}");
    }
}

#[test]
fn posterior_mean_vjp_matches_finite_differences() {
    let model = GmmModel::ring(4, 3.0, 0.8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for ab in [0.9, 0.4, 0.05] {
        let x = model.sample_marginal(ab, &mut rng);
        let g = standard_normal(&mut rng, 2);
        let vjp = model.posterior_mean_vjp(ab, &x, &g).unwrap();
        for j in 0..2 {
            let h = 1e-6;
            let mut up = x.clone();
            let mut dn = x.clone();
            up[j] += h;
            dn[j] -= h;
            let mu = model.posterior_mean(ab, &up).unwrap();
            let md = model.posterior_mean(ab, &dn).unwrap();
            let fd: f64 = (0..2).map(|i| g[i] * (mu[i] - md[i]) / (2.0 * h)).sum();
            assert!((fd - vjp[j]).abs() < 1e-6 * fd.abs().max(1.0), "abar={ab} j={j}: {fd} vs {}", vjp[j]);
        }
    }
}

#[test]
fn box_mass_matches_monte_carlo() {
    let model = GmmModel::ring(8, 8.0, 1.0).unwrap();
    let (lower, upper) = ([6.5, -1.0], [9.0, 1.5]);
    let p = model.box_mass(&lower, &upper).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let n = 200_000;
    let region = Region::Box {
        lower: lower.to_vec(),
        upper: upper.to_vec(),
    };
    let hits = (0..n).filter(|_| region.contains(&model.sample_prior(&mut rng).1)).count();
    let phat = hits as f64 / n as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!((phat - p).abs() < 4.0 * se, "{phat} vs {p}");
}

#[test]
fn ess_of_two_to_one_weights() {
    let e = smc_guide::smc::ess(&[(2.0f64 / 3.0).ln(), (1.0f64 / 3.0).ln()]).unwrap();
    assert!((e - 1.8).abs() < 1e-12);
    assert!(smc_guide::smc::ess(&[f64::NEG_INFINITY; 3]).is_err());
}

#[test]
fn unweighted_sampler_reproduces_prior_mean() {
    let model = GmmModel::new(vec![vec![2.0, 0.0], vec![-1.0, 3.0]], 1.0, Some(vec![0.3, 0.7])).unwrap();
    let schedule = make_linear_schedule(100, 1e-4, 0.2).unwrap();
    let lik = Likelihood::classifier(model.clone(), 0, 1.0).unwrap();
    let n = 10_000;
    let cfg = SamplerConfig {
        n_particles: n,
        resampling: ResampleSchedule::new(vec![], ResampleMethod::Systematic),
        proposal: smc_guide::smc::Proposal::Unconditional,
        estimator: Estimator::Dps,
        seed: 17,
    };
    let out = run_sampler(&model, &schedule, &lik, &cfg).unwrap();
    assert!(out.trace.is_empty());
    assert_eq!(out.nfe, n * 100);
    let truth = [0.3 * 2.0 - 0.7, 0.7 * 3.0];
    for d in 0..2 {
        let xs: Vec<f64> = out.particles.states.iter().map(|x| x[d]).collect();
        let se = (sample_variance(&xs) / n as f64).sqrt();
        assert!((mean(&xs) - truth[d]).abs() < 3.0 * se, "dim {d}: {} vs {}", mean(&xs), truth[d]);
    }
}

#[test]
fn two_component_classifier_guidance_reaches_target() {
    let cfg = config("sample_two_gmm.toml");
    let r = cfg.resolve().unwrap();
    let mut fractions = Vec::new();
    for seed in 0..20 {
        let out = run_sampler(&r.model, &r.schedule, &r.likelihood, &cfg.sampler_config(r.estimator.clone(), seed)).unwrap();
        let hits = out
            .particles
            .states
            .iter()
            .filter(|x| classified_as(&r.model, x, 1).unwrap())
            .count();
        fractions.push(hits as f64 / out.particles.len() as f64);
    }
    let avg = mean(&fractions);
    assert!(avg >= 0.9, "fraction in class 1: {avg} ({fractions:?})");
}

#[test]
fn multinomial_resampling_preserves_weighted_means() {
    let w = [0.05, 0.4, 0.15, 0.3, 0.1];
    let f = [1.0, -2.0, 0.5, 3.0, 0.0];
    let truth: f64 = w.iter().zip(&f).map(|(a, b)| a * b).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let draws: Vec<f64> = (0..10_000)
        .map(|_| {
            let idx = resample_indices(&w, ResampleMethod::Multinomial, &mut rng);
            assert_eq!(idx.len(), w.len());
            idx.iter().map(|i| f[*i]).sum::<f64>() / w.len() as f64
        })
        .collect();
    let se = (sample_variance(&draws) / draws.len() as f64).sqrt();
    assert!((mean(&draws) - truth).abs() < 3.0 * se, "{} vs {truth}", mean(&draws));
}

#[test]
fn log_weights_telescope_to_final_estimate_plus_corrections() {
    let model = GmmModel::ring(8, 8.0, 1.0).unwrap();
    let schedule = make_linear_schedule(30, 1e-3, 0.3).unwrap();
    let lik = Likelihood::gaussian(vec![8.0, 0.0], 4.0).unwrap();
    let est = Estimator::NaiveMc { samples: 4, steps: Some(4) };
    let proposal = smc_guide::smc::Proposal::Guided { guidance_scale: 0.7 };
    let mut set = init_particles(6, 2, 30, 19).unwrap();
    let mut total_corr = [0.0; 6];
    for t in (1..=30).rev() {
        let (c, _) = propagate(&mut set, &proposal, &model, &lik, &schedule, 19).unwrap();
        for (a, b) in total_corr.iter_mut().zip(&c) {
            *a += b;
        }
        if t % 7 == 0 || t == 1 {
            weigh_and_resample(&mut set, &est, &model, &lik, &schedule, ResampleMethod::Systematic, ResamplePolicy::Never, 19)
                .unwrap();
        }
    }
    for (i, corr) in total_corr.iter().enumerate() {
        let expect = set.cached_log_lik[i] + corr;
        assert!((set.log_weights[i] - expect).abs() < 1e-8, "{i}: {} vs {expect}", set.log_weights[i]);
    }
}

#[test]
fn naive_and_mlmc_agree_with_reference_in_expectation() {
    let model = GmmModel::symmetric(vec![1.0, 0.5], 1.0).unwrap();
    let schedule = make_linear_schedule(100, 1e-4, 0.2).unwrap();
    let lik = Likelihood::classifier(model.clone(), 0, 1.0).unwrap();
    let plan = MlmcPlan::new(4, 2, vec![8, 4, 2]).unwrap();
    let x_t = [0.8, -0.4];
    let t = 30;
    let fine = make_level_grid(&schedule, t as f64, 4, 2, 2).unwrap();
    let key = StreamKey::new(20, Purpose::Study);
    let (reference, ref_se) = reference_integral(&model, &schedule, &lik, &fine, &x_t, 50_000, key.step(1)).unwrap();
    let reps = 300;
    let naive: Vec<f64> = (0..reps)
        .map(|r| {
            estimate_naive_mc(&model, &schedule, &lik, &x_t, 4, &fine, key.step(2).particle(r))
                .unwrap()
                .value
        })
        .collect();
    let mlmc: Vec<f64> = (0..reps)
        .map(|r| {
            estimate_mlmc(&model, &schedule, &lik, t, &x_t, &plan, key.step(3).particle(r))
                .unwrap()
                .value
        })
        .collect();
    for (name, v) in [("naive", naive), ("mlmc", mlmc)] {
        let se = (sample_variance(&v) / v.len() as f64).sqrt();
        let z = (mean(&v) - reference) / (se * se + ref_se * ref_se).sqrt();
        assert!(z.abs() < 3.0, "{name}: mean {} reference {reference} z {z}", mean(&v));
    }
}
