use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use smc_guide::config::RunConfig;
use smc_guide::experiments::{self, ess::trace_lines, fmt, write_metadata, write_table, TRACE_HEADER};
use smc_guide::smc::run_sampler;
use smc_guide::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "smc-guide", version, about = "SMC sampling with multilevel likelihood estimates on Gaussian-mixture diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SMC_GUIDE_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config file and print its digest.
    Validate(Common),
    /// Run one SMC sampler and write particles and trace.
    Sample(Common),
    /// Run a named study.
    Experiment {
        id: String,
        #[command(flatten)]
        common: Common,
    },
    /// Weight after every step without resampling and suggest resampling steps.
    Pilot(Common),
}

#[derive(Args)]
struct Common {
    /// Config file (positional form).
    path: Option<PathBuf>,
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent of the run directory (default: config `out`, else `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse an existing run directory.
    #[arg(long)]
    force: bool,
}

enum Failure {
    Config(serde_json::Value),
    Runtime(serde_json::Value),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let body = json!({
            "kind": error_kind(&e),
            "message": e.to_string(),
            "violations": e.violations(),
        });
        if e.is_config() {
            Failure::Config(body)
        } else {
            Failure::Runtime(body)
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(inner) => inner.into(),
            Err(e) => Failure::Runtime(json!({ "kind": "runtime", "message": format!("{e:#}") })),
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config { .. } | Error::Validation(_) => "config",
        Error::Shape { .. } => "shape",
        Error::Index { .. } => "index",
        Error::Contract(_) => "contract",
        Error::NonFinite { .. } => "non_finite",
        Error::AllInfeasible { .. } => "all_infeasible",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(cli.command) {
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(Failure::Config(body)) => {
            eprintln!("{}", json!({ "error": body }));
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(body)) => {
            eprintln!("{}", json!({ "error": body }));
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn run(command: Command) -> Result<serde_json::Value, Failure> {
    match command {
        Command::Validate(c) => {
            let cfg = load(&c, None)?;
            Ok(json!({ "valid": true, "digest": cfg.digest()?, "assumptions": cfg.assumptions() }))
        }
        Command::Sample(c) => {
            let cfg = load(&c, None)?;
            let dir = run_dir(&cfg, &c, "sample")?;
            sample(&cfg, &dir)
        }
        Command::Experiment { id, common } => {
            let cfg = load(&common, Some(&id))?;
            if !smc_guide::config::EXPERIMENTS.contains(&id.as_str()) {
                return Err(Error::config("experiment", format!("unknown experiment `{id}`")).into());
            }
            let dir = run_dir(&cfg, &common, &id)?;
            let summary = experiments::run_experiment(&id, &cfg, &dir)?;
            Ok(serde_json::to_value(summary).map_err(Error::from)?)
        }
        Command::Pilot(c) => {
            let cfg = load(&c, None)?;
            let dir = run_dir(&cfg, &c, "pilot")?;
            pilot(&cfg, &dir)
        }
    }
}

/// Reads and validates the config. An experiment without a config file
/// falls back to `configs/<id>.toml` when that exists.
fn load(c: &Common, experiment: Option<&str>) -> Result<RunConfig, Failure> {
    let path = match (c.config.as_ref().or(c.path.as_ref()), experiment) {
        (Some(p), _) => p.clone(),
        (None, Some(id)) if Path::new("configs").join(format!("{id}.toml")).exists() => {
            Path::new("configs").join(format!("{id}.toml"))
        }
        _ => return Err(Error::config("config", "no config file given (use --config)").into()),
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_toml_str(&text)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cfg: &RunConfig, c: &Common, label: &str) -> Result<PathBuf, Failure> {
    let parent = c
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let digest = cfg.digest()?;
    let dir = parent.join(format!("{label}-{}-seed{}", &digest[..12], cfg.seed));
    if dir.exists() && !c.force {
        return Err(Failure::Runtime(json!({
            "kind": "output_exists",
            "message": format!("{} already exists (pass --force to overwrite)", dir.display()),
        })));
    }
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::from)?;
    log::info!("writing to {}", dir.display());
    Ok(dir)
}

fn sample(cfg: &RunConfig, dir: &Path) -> Result<serde_json::Value, Failure> {
    let r = cfg.resolve()?;
    let sc = cfg.sampler_config(r.estimator.clone(), cfg.seed);
    let out = run_sampler(&r.model, &r.schedule, &r.likelihood, &sc)?;
    let meta = write_metadata(dir, cfg, "sample")?;

    let d = r.model.dim();
    let mut header: Vec<String> = vec!["particle".into()];
    header.extend((0..d).map(|i| format!("x{i}")));
    header.push("log_weight".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = out
        .particles
        .states
        .iter()
        .zip(&out.particles.log_weights)
        .enumerate()
        .map(|(i, (x, w))| {
            let mut row = vec![i.to_string()];
            row.extend(x.iter().map(|v| fmt(*v)));
            row.push(fmt(*w));
            row
        })
        .collect();
    let particles = dir.join("particles.csv");
    write_table(&particles, &header, &rows)?;

    let lines = trace_lines("sample", &out.trace, sc.n_particles);
    let trace_rows: Vec<Vec<String>> = lines
        .iter()
        .map(|l| vec![l.run_id.clone(), l.t.to_string(), fmt(l.ess), l.epoch.to_string(), l.nfe.to_string()])
        .collect();
    let trace = dir.join("trace.csv");
    write_table(&trace, &TRACE_HEADER, &trace_rows)?;

    let mut hits = 0;
    for x in &out.particles.states {
        hits += experiments::benchmark::classified_as(&r.model, x, r.target_class)? as usize;
    }
    Ok(json!({
        "files": [meta, particles, trace],
        "nfe": out.nfe,
        "target_class": r.target_class,
        "fraction_in_target": hits as f64 / sc.n_particles as f64,
        "clamped_estimates": out.clamped_estimates,
    }))
}

fn pilot(cfg: &RunConfig, dir: &Path) -> Result<serde_json::Value, Failure> {
    let report = experiments::pilot::run_pilot(cfg)?;
    let meta = write_metadata(dir, cfg, "pilot")?;
    let lines = trace_lines("pilot", &report.trace, report.particles);
    let rows: Vec<Vec<String>> = lines
        .iter()
        .map(|l| vec![l.run_id.clone(), l.t.to_string(), fmt(l.ess), l.epoch.to_string(), l.nfe.to_string()])
        .collect();
    let trace = dir.join("pilot_trace.csv");
    write_table(&trace, &TRACE_HEADER, &rows)?;
    Ok(json!({
        "files": [meta, trace],
        "nfe": report.nfe,
        "suggested_resample_steps": report.suggested_steps,
    }))
}
