use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ssm_newton::bench::{emit_table, load_table, read_observations, run_experiment, write_dataset, write_trace, ExperimentConfig};
use ssm_newton::models::{model_by_name, simulate, LinearGaussianConfig, LinearGaussianSpec, ModelSpec};
use ssm_newton::optimizer::{newton_solve, Method, OptimizerConfig, StepPolicy};
use ssm_newton::{Error, Result};

const OUT_ENV: &str = "SSM_NEWTON_OUT";

#[derive(Parser)]
#[command(name = "ssm-newton", version, about = "Newton-method ML estimation for state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it as CSV.
    Simulate(SimulateArgs),
    /// Estimate parameters from one dataset.
    Estimate(EstimateArgs),
    /// Run a replicated experiment described by a TOML file.
    Benchmark(BenchmarkArgs),
    /// Print the summary table of a benchmark output directory.
    Table(TableArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// model1, model2 or lgss
    #[arg(long)]
    model: String,
    /// TOML file with the system matrices for `--model lgss`.
    #[arg(long)]
    lgss: Option<PathBuf>,
}

impl ModelArgs {
    fn build(&self) -> Result<ModelSpec> {
        let spec = match &self.lgss {
            Some(p) => {
                let text = read_config(p)?;
                let cfg: LinearGaussianConfig =
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Some(LinearGaussianSpec::try_from(cfg)?)
            }
            None => None,
        };
        model_by_name(&self.model, spec)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated parameter values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Vec<f64>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV file; defaults to data.csv under $SSM_NEWTON_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    method: Method,
    /// Dataset CSV as written by `simulate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta0: Vec<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    grad_tol: Option<f64>,
    #[arg(long)]
    param_tol: Option<f64>,
    /// Forward particles M.
    #[arg(long)]
    particles: Option<usize>,
    /// Fixed-lag Δ.
    #[arg(long)]
    lag: Option<usize>,
    /// Backward trajectories M̄.
    #[arg(long)]
    mbar: Option<usize>,
    #[arg(long)]
    mlimit: Option<usize>,
    /// line-search, stochastic or stochastic:<exponent>
    #[arg(long)]
    step_policy: Option<StepPolicy>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the trace CSV and estimate.json; defaults to $SSM_NEWTON_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to $SSM_NEWTON_OUT, then `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

fn read_config(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))
}

fn env_out() -> Option<PathBuf> {
    std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn out_dir(flag: Option<PathBuf>, fallback: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(env_out)
        .or(fallback)
        .ok_or_else(|| Error::Config(format!("no output location: pass --out or set {OUT_ENV}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let model = a.model.build()?;
    let path = match a.out {
        Some(p) => p,
        None => out_dir(None, None)?.join("data.csv"),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let (x, y) = simulate(model.as_ref(), &a.theta, a.n, a.seed)?;
    write_dataset(&path, &x, &y)?;
    println!("wrote {} ({} steps)", path.display(), y.len());
    Ok(())
}

#[derive(Serialize)]
struct EstimateSummary<'a> {
    model: &'a str,
    method: Method,
    theta0: &'a [f64],
    theta: &'a [f64],
    iterations: usize,
    converged: bool,
    stop: &'a str,
    total_seconds: f64,
}

fn cmd_estimate(a: EstimateArgs) -> Result<()> {
    let model = a.model.build()?;
    let y = read_observations(&a.data)?;
    let mut cfg = OptimizerConfig::new(a.method, a.theta0.clone());
    if let Some(v) = a.max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = a.grad_tol {
        cfg.grad_tol = v;
    }
    if let Some(v) = a.param_tol {
        cfg.param_tol = v;
    }
    if let Some(v) = a.particles {
        cfg.smoother.particles = v;
    }
    if let Some(v) = a.lag {
        cfg.smoother.lag = v;
    }
    if let Some(v) = a.mbar {
        cfg.smoother.backward = v;
    }
    if let Some(v) = a.mlimit {
        cfg.smoother.m_limit = v;
    }
    if let Some(v) = a.step_policy {
        cfg.step_policy = v;
    }
    cfg.seed = a.seed;
    let dir = out_dir(a.out, None)?;
    create_dir(&dir)?;

    let trace = newton_solve(model.as_ref(), &y, &cfg)?;
    write_trace(&dir, 0, &trace)?;
    let summary = EstimateSummary {
        model: &a.model.model,
        method: a.method,
        theta0: &a.theta0,
        theta: &trace.theta,
        iterations: trace.iterations(),
        converged: trace.converged,
        stop: trace.stop.as_str(),
        total_seconds: trace.total_seconds,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(dir.join("estimate.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn cmd_benchmark(a: BenchmarkArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let dir = out_dir(a.out, cfg.out.clone())?;
    let out = run_experiment(&cfg, Some(&dir), a.jobs)?;
    let title = format!("{} (N = {}, {} replicates)", cfg.model, cfg.n, cfg.replicates);
    print!("{}", emit_table(&out.rows, &title));
    println!("results in {}", dir.display());
    Ok(())
}

fn cmd_table(a: TableArgs) -> Result<()> {
    let (cfg, rows) = load_table(&a.input)?;
    let title = format!("{} (N = {}, {} replicates)", cfg.model, cfg.n, cfg.replicates);
    print!("{}", emit_table(&rows, &title));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Table(a) => cmd_table(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
