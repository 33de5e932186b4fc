mod common;

use std::fs;

use smc_guide::experiments::{ess, run_experiment, variance};
use smc_guide::schedule::make_linear_schedule;
use smc_guide::GmmModel;

use common::config;

fn header(path: &std::path::Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn tables_carry_the_documented_headers() {
    let expect = [
        ("guidance", "guidance.toml", "report.csv", "method,success_rate,nfe,wall_time_s,cost_per_success_s"),
        ("ess_trace", "ess_trace.toml", "traces.csv", "run_id,t,ess,epoch,nfe"),
        ("variance_decay", "variance_decay.toml", "variance.csv", "level,variance,cost,n_pairs"),
        ("posterior", "posterior.toml", "posterior_grid.csv", "panel,t,x,y,density"),
        ("posterior", "posterior.toml", "posterior_points.csv", "panel,t,kind,x,y"),
    ];
    for (id, file, table, want) in expect {
        let dir = tempfile::tempdir().unwrap();
        let summary = run_experiment(id, &config(file), dir.path()).unwrap();
        assert!(summary.files.iter().any(|f| f.ends_with("metadata.json")));
        assert_eq!(header(&dir.path().join(table)), want, "{id}/{table}");
    }
}

#[test]
fn metadata_records_the_unstated_refinement_factor() {
    let cfg = config("cifar_like.toml");
    assert_eq!(cfg.smc.resample_steps, vec![60, 50, 40, 30]);
    let dir = tempfile::tempdir().unwrap();
    run_experiment("cost_per_success", &cfg, dir.path()).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("metadata.json")).unwrap()).unwrap();
    let notes = meta["assumptions"].as_array().unwrap();
    assert!(notes.iter().any(|n| n.as_str().unwrap().contains("M = 2")), "{notes:?}");
    assert_eq!(meta["digest"].as_str().unwrap(), cfg.digest().unwrap());
}

#[test]
fn ess_without_resampling_collapses_and_resampling_restores_it() {
    let study = ess::run_ess_trace_study(&config("ess_trace.toml")).unwrap();
    let n = study.summary.particles as f64;
    for seed in [3000, 3001, 3002] {
        let off = study.run(&format!("off-{seed}"));
        assert_eq!(off.len(), 100);
        let early = off[..10].iter().map(|l| l.ess).sum::<f64>() / 10.0;
        let late = off[90..].iter().map(|l| l.ess).sum::<f64>() / 10.0;
        assert!(late < early && late < 0.2 * n, "seed {seed}: {early} -> {late}");
        let on = study.run(&format!("on-{seed}"));
        let restored: Vec<_> = on.windows(2).filter(|w| w[1].epoch == w[0].epoch + 1).collect();
        assert_eq!(restored.len(), 4);
        assert!(restored.iter().all(|w| w[1].ess == n && w[0].t == w[1].t));
        assert_eq!(on.last().unwrap().epoch, 4);
    }
}

#[test]
fn variance_fit_recovers_a_planted_rate() {
    let v: Vec<f64> = (0..5).map(|l| 0.3 * 2f64.powf(-1.5 * l as f64)).collect();
    let (a, beta) = variance::fit_decay(&v, 2).unwrap();
    assert!((beta - 1.5).abs() < 1e-12);
    assert!((a - 0.3f64.log2()).abs() < 1e-12);
    assert!(variance::fit_decay(&v[..2], 2).is_none());
}

#[test]
fn coupled_level_differences_shrink() {
    let model = GmmModel::symmetric(vec![1.0, 0.5], 1.0).unwrap();
    let schedule = make_linear_schedule(100, 1e-4, 0.2).unwrap();
    let lik = smc_guide::Likelihood::classifier(model.clone(), 0, 1.0).unwrap();
    let key = smc_guide::rng::StreamKey::new(5, smc_guide::rng::Purpose::Study);
    let levels = variance::level_statistics(&model, &schedule, &lik, 40, &[0.3, -0.2], 4, 2, 3, 4000, key).unwrap();
    for w in levels[1..].windows(2) {
        assert!(w[1].variance < w[0].variance, "{} -> {}", w[0].variance, w[1].variance);
    }
    assert_eq!(levels.iter().map(|l| l.fine_steps).collect::<Vec<_>>(), vec![4, 8, 16, 32]);
}
