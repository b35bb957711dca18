use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gmclab::acceptance::{suite, Budget, DEFAULT_SEED};
use gmclab::experiment::{self, ExperimentConfig};
use gmclab::field_sampler::{ScaleLadder, SlabSampler};
use gmclab::rng::StreamKey;

#[derive(Parser)]
#[command(name = "gmclab", version, about = "Log-correlated fields and complex multiplicative chaos experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    /// multiplies the replica count
    #[arg(long, default_value_t = 1.0)]
    budget: f64,
    /// output directory
    #[arg(long, env = "GMCLAB_OUT")]
    out: Option<PathBuf>,
    /// numeric parameter, `name=value` (repeatable)
    #[arg(long = "param", value_parser = parse_kv)]
    params: Vec<(String, String)>,
    /// string option, `name=value` (repeatable)
    #[arg(long = "option", value_parser = parse_kv)]
    options: Vec<(String, String)>,
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| format!("expected name=value, got '{s}'"))
}

#[derive(Subcommand)]
enum Command {
    Kernel {
        #[command(subcommand)]
        action: KernelAction,
    },
    Sample {
        #[command(subcommand)]
        action: SampleAction,
    },
    Measure(Common),
    Norms(Common),
    Qv(Common),
    Clt(Common),
    Brw(Common),
    Selftest {
        #[command(subcommand)]
        action: SelftestAction,
    },
    /// Run an acceptance suite; exit code 0 iff every criterion passes
    Suite {
        /// kernel, gmc, qv, clt, brw or all
        name: String,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        budget: f64,
        #[arg(long, env = "GMCLAB_OUT")]
        out: Option<PathBuf>,
    },
    /// Summarise a result CSV and write a gnuplot script next to it
    Report { csv: PathBuf },
    /// List registered experiments
    List,
    /// Run an experiment by id from a config file
    Run {
        #[command(flatten)]
        common: Common,
        /// experiment id (defaults to the one in the config)
        #[arg(long)]
        experiment: Option<String>,
    },
}

#[derive(Subcommand)]
enum KernelAction {
    /// Deterministic kernel identity checks
    Check(Common),
}

#[derive(Subcommand)]
enum SampleAction {
    /// Field samples and pointwise products
    Field {
        #[command(flatten)]
        common: Common,
        /// also write replica 0 of X_t as raw f64 with a JSON sidecar
        #[arg(long)]
        dump: bool,
    },
}

#[derive(Subcommand)]
enum SelftestAction {
    /// Brownian barrier closed forms against Monte Carlo
    Gaussian(Common),
}

fn build_config(id: &str, c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::new(id, DEFAULT_SEED, 100),
    };
    if c.config.is_some() && cfg.experiment != id {
        bail!("config is for experiment '{}', not '{id}'", cfg.experiment);
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(r) = c.replicas {
        cfg.replicas = r;
    }
    if !(c.budget > 0.0) {
        bail!("--budget must be positive");
    }
    cfg.replicas = ((cfg.replicas as f64 * c.budget).round() as usize).max(1);
    for (k, v) in &c.params {
        cfg.params.insert(k.clone(), v.parse().with_context(|| format!("parameter {k} is not a number"))?);
    }
    for (k, v) in &c.options {
        cfg.options.insert(k.clone(), v.clone());
    }
    if let Some(o) = &c.out {
        cfg.output_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(experiment::default_output_dir)
}

fn run_experiment(id: &str, c: &Common) -> Result<ExitCode> {
    let cfg = build_config(id, c)?;
    let files = experiment::run(&cfg, &out_dir(&cfg))?;
    print_report(&files.csv)?;
    Ok(ExitCode::SUCCESS)
}

fn print_report(csv: &Path) -> Result<()> {
    let (rep, json, gp) = experiment::write_report(csv)?;
    println!("results: {}", csv.display());
    println!("summary: {}", json.display());
    println!("plot script: {}", gp.display());
    for n in &rep.notes {
        println!("note: {n}");
    }
    for c in &rep.checks {
        println!("[{}] {}: {:.6} vs {:.6} (tolerance {:.3e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.target, c.tolerance);
    }
    Ok(())
}

fn dump_field(cfg: &ExperimentConfig) -> Result<()> {
    let kernel = cfg.kernel.build()?;
    let grid = gmclab::field_sampler::GridSpec::new(kernel.d(), cfg.grid.n_per_side, cfg.grid.box_size)?;
    let sampler = SlabSampler::new(&kernel, grid)?;
    let ladder = ScaleLadder::uniform(cfg.ladder.dt, cfg.ladder.t_max)?;
    let field = sampler.sample_ladder(&ladder, StreamKey::new(cfg.seed, 0, 0))?.top()?;
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}-field.f64", experiment::file_stem(cfg)));
    field.write_raw(&path)?;
    println!("field: {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Kernel { action: KernelAction::Check(c) } => run_experiment("kernel_check", &c),
        Command::Sample { action: SampleAction::Field { common, dump } } => {
            if dump {
                dump_field(&build_config("sample_field", &common)?)?;
            }
            run_experiment("sample_field", &common)
        }
        Command::Measure(c) => run_experiment("measure", &c),
        Command::Norms(c) => run_experiment("norms", &c),
        Command::Qv(c) => run_experiment("qv", &c),
        Command::Clt(c) => run_experiment("clt", &c),
        Command::Brw(c) => run_experiment("brw", &c),
        Command::Selftest { action: SelftestAction::Gaussian(c) } => run_experiment("selftest_gaussian", &c),
        Command::Run { common, experiment } => {
            let id = match (&experiment, &common.config) {
                (Some(id), _) => id.clone(),
                (None, Some(p)) => ExperimentConfig::from_file(p)?.experiment,
                (None, None) => bail!("give --experiment or --config"),
            };
            experiment::lookup(&id)?;
            run_experiment(&id, &common)
        }
        Command::Report { csv } => {
            print_report(&csv)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::List => {
            for e in experiment::REGISTRY {
                println!("{:<18} gmclab {:<18} {}", e.id, e.command, e.probes);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Suite { name, seed, budget, out } => {
            if !(budget > 0.0) {
                bail!("--budget must be positive");
            }
            let rep = suite(&name, Budget(budget), seed)?;
            for c in &rep.criteria {
                println!("{}", c.line());
            }
            let dir = out.unwrap_or_else(experiment::default_output_dir);
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("suite-{name}-{seed}.json"));
            std::fs::write(&path, serde_json::to_vec_pretty(&rep)?)?;
            println!("suite report: {}", path.display());
            Ok(if rep.all_pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
