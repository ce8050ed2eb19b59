//! Replicated estimation experiments: simulate datasets, run each method,
//! and summarize bias, MSE, iteration counts and timing.
//!
//! Output directory layout:
//!
//! ```text
//! estimates.csv            one row per replicate × method
//! traces/<method>_rep<r>.csv
//! table.csv, table.txt     aggregate bias / MSE per method and parameter
//! timings.csv              wall-clock, not reproducible
//! metadata.json            config echo, seeds, versions
//! ```
//!
//! Every file except `timings.csv` is a deterministic function of the config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map_smoother::GaussNewtonOptions;
use crate::models::{
    model_by_name, simulate, LinearGaussianConfig, LinearGaussianSpec, ModelSpec, ObservationSequence, Series,
    StateTrajectory,
};
use crate::optimizer::{newton_solve, Method, NewtonTrace, OptimizerConfig, StepPolicy};
use crate::particle::SmootherConfig;
use crate::rng::{derive_seed, RNG_NAME};

/// Version of the on-disk result layout.
pub const SCHEMA_VERSION: u32 = 1;

fn default_replicates() -> usize {
    20
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

/// Per-method optimizer settings; unset fields keep the method defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_policy: Option<StepPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoother: Option<SmootherConfig>,
}

impl MethodOverrides {
    pub fn apply(&self, cfg: &mut OptimizerConfig) {
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.grad_tol {
            cfg.grad_tol = v;
        }
        if let Some(v) = self.param_tol {
            cfg.param_tol = v;
        }
        if let Some(v) = self.step_policy {
            cfg.step_policy = v;
        }
        if let Some(v) = self.fd_step {
            cfg.fd_step = v;
        }
        if let Some(s) = &self.smoother {
            // the smoother kind always follows the method
            let kind = cfg.smoother.kind;
            cfg.smoother = s.clone();
            cfg.smoother.kind = kind;
        }
    }
}

/// Experiment description, read from TOML.
///
/// ```toml
/// model = "model1"
/// theta_true = [0.5, 0.3]
/// theta0 = [0.7, 0.0]
/// n = 1000
/// replicates = 20
/// methods = ["ALG2", "ALG3FL", "ALG3FFBSi", "NUM"]
/// seed = 2024
///
/// [overrides.ALG3FL]
/// param_tol = 1e-3
/// smoother = { lag = 12, particles = 2000 }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    pub theta_true: Vec<f64>,
    pub theta0: Vec<f64>,
    pub n: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Keyed by method name (case-insensitive).
    #[serde(default)]
    pub overrides: BTreeMap<String, MethodOverrides>,
    #[serde(default)]
    pub seed: u64,
    /// Report |θ₁| instead of θ₁. Defaults to true for model1, whose
    /// likelihood is symmetric in the sign of θ₁.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirror_theta1: Option<bool>,
    /// Gauss-Newton settings for the ALG2 smoother.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gauss_newton_max_iters: Option<usize>,
    /// System matrices when `model = "lgss"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lgss: Option<LinearGaussianConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// The model 1 study: θ* = (0.5, 0.3), θ0 = (0.7, 0.0).
    pub fn model1(n: usize, replicates: usize, seed: u64) -> Self {
        Self::new("model1", vec![0.5, 0.3], vec![0.7, 0.0], n, replicates, seed)
    }

    /// The model 2 study: θ* = (0.7, 0.5), θ0 = (0.5, 0.7).
    pub fn model2(n: usize, replicates: usize, seed: u64) -> Self {
        Self::new("model2", vec![0.7, 0.5], vec![0.5, 0.7], n, replicates, seed)
    }

    pub fn new(model: &str, theta_true: Vec<f64>, theta0: Vec<f64>, n: usize, replicates: usize, seed: u64) -> Self {
        Self {
            model: model.to_string(),
            theta_true,
            theta0,
            n,
            replicates,
            methods: default_methods(),
            overrides: BTreeMap::new(),
            seed,
            mirror_theta1: None,
            gauss_newton_max_iters: None,
            lgss: None,
            out: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn build_model(&self) -> Result<ModelSpec> {
        let lgss = self.lgss.clone().map(LinearGaussianSpec::try_from).transpose()?;
        model_by_name(&self.model, lgss)
    }

    pub fn mirrors_theta1(&self) -> bool {
        self.mirror_theta1.unwrap_or(self.model == "model1")
    }

    /// Optimizer configuration for `method` in replicate `r`.
    pub fn optimizer_config(&self, method: Method, r: usize) -> Result<OptimizerConfig> {
        let mut cfg = OptimizerConfig::new(method, self.theta0.clone());
        for (key, ov) in &self.overrides {
            if key.parse::<Method>()? == method {
                ov.apply(&mut cfg);
            }
        }
        if let Some(k) = self.gauss_newton_max_iters {
            cfg.gauss_newton = GaussNewtonOptions { max_iters: k, ..cfg.gauss_newton };
        }
        cfg.seed = method_seed(self.seed, r, method);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<ModelSpec> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        for key in self.overrides.keys() {
            key.parse::<Method>()?;
        }
        let model = self.build_model()?;
        if self.theta_true.len() != model.n_params() {
            return Err(Error::Dimension(format!(
                "theta_true has {} entries, model {} has {} parameters",
                self.theta_true.len(),
                model.name(),
                model.n_params()
            )));
        }
        for &m in &self.methods {
            self.optimizer_config(m, 0)?.validate(model.as_ref(), self.n)?;
        }
        Ok(model)
    }
}

pub fn data_seed(master: u64, r: usize) -> u64 {
    derive_seed(master, &["data".into(), r.into()])
}

pub fn method_seed(master: u64, r: usize, method: Method) -> u64 {
    derive_seed(master, &[r.into(), method.name().into()])
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Success {
        theta: Vec<f64>,
        iterations: usize,
        converged: bool,
        stop: String,
    },
    Failed {
        message: String,
    },
}

/// One method run on one dataset.
#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub method: Method,
    pub outcome: Outcome,
    pub trace: Option<NewtonTrace>,
}

impl ReplicateResult {
    pub fn theta(&self) -> Option<&[f64]> {
        match &self.outcome {
            Outcome::Success { theta, .. } => Some(theta),
            Outcome::Failed { .. } => None,
        }
    }

    pub fn iterations(&self) -> Option<usize> {
        match &self.outcome {
            Outcome::Success { iterations, .. } => Some(*iterations),
            Outcome::Failed { .. } => None,
        }
    }

    pub fn seconds_per_iteration(&self) -> Option<f64> {
        self.trace.as_ref().map(NewtonTrace::seconds_per_iteration)
    }
}

/// Aggregate over the successful replicates of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: Method,
    pub successes: usize,
    pub failures: usize,
    /// mean(θ̂ − θ*) per coordinate.
    pub bias: Vec<f64>,
    /// mean((θ̂ − θ*)²) per coordinate.
    pub mse: Vec<f64>,
    pub median_iterations: f64,
    /// Mean wall-clock seconds per trace entry; absent when not measured.
    pub seconds_per_iter: Option<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Bias, MSE and iteration summary for one method.
pub fn summarize(method: Method, theta_true: &[f64], results: &[&ReplicateResult]) -> BenchmarkRow {
    let p = theta_true.len();
    let ok: Vec<&ReplicateResult> = results.iter().copied().filter(|r| r.theta().is_some()).collect();
    let mut bias = vec![0.0; p];
    let mut mse = vec![0.0; p];
    for r in &ok {
        for (j, (&est, &truth)) in r.theta().unwrap().iter().zip(theta_true).enumerate() {
            let e = est - truth;
            bias[j] += e;
            mse[j] += e * e;
        }
    }
    let k = ok.len() as f64;
    if ok.is_empty() {
        bias.fill(f64::NAN);
        mse.fill(f64::NAN);
    } else {
        bias.iter_mut().for_each(|b| *b /= k);
        mse.iter_mut().for_each(|m| *m /= k);
    }
    let timed: Vec<f64> = ok.iter().filter_map(|r| r.seconds_per_iteration()).collect();
    BenchmarkRow {
        method,
        successes: ok.len(),
        failures: results.len() - ok.len(),
        bias,
        mse,
        median_iterations: median(ok.iter().map(|r| r.iterations().unwrap() as f64).collect()),
        seconds_per_iter: (!timed.is_empty()).then(|| timed.iter().sum::<f64>() / timed.len() as f64),
    }
}

pub fn summarize_all(methods: &[Method], theta_true: &[f64], results: &[ReplicateResult]) -> Vec<BenchmarkRow> {
    methods
        .iter()
        .map(|&m| {
            let rs: Vec<&ReplicateResult> = results.iter().filter(|r| r.method == m).collect();
            summarize(m, theta_true, &rs)
        })
        .collect()
}

/// Plain-text table with bias and MSE scaled by 10⁴. A `*` marks the
/// smallest |bias| and MSE in each column (all tied entries are marked).
pub fn emit_table(rows: &[BenchmarkRow], title: &str) -> String {
    let p = rows.iter().map(|r| r.bias.len()).max().unwrap_or(0);
    let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
    for j in 0..p {
        cols.push((format!("bias θ{}", j + 1), rows.iter().map(|r| r.bias[j] * 1e4).collect()));
    }
    for j in 0..p {
        cols.push((format!("MSE θ{}", j + 1), rows.iter().map(|r| r.mse[j] * 1e4).collect()));
    }
    let best: Vec<f64> = cols
        .iter()
        .map(|(_, v)| {
            v.iter()
                .map(|x| (x.round()).abs())
                .filter(|x| x.is_finite())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let with_time = rows.iter().any(|r| r.seconds_per_iter.is_some());

    let mut s = String::new();
    writeln!(s, "{title}").unwrap();
    writeln!(s, "bias and MSE ×1e4; * marks the smallest magnitude per column").unwrap();
    write!(s, "{:<10}", "method").unwrap();
    for (name, _) in &cols {
        write!(s, "{:>11}", name).unwrap();
    }
    write!(s, "{:>8}{:>8}", "iters", "ok").unwrap();
    if with_time {
        write!(s, "{:>10}", "s/iter").unwrap();
    }
    s.push('\n');
    for (i, r) in rows.iter().enumerate() {
        write!(s, "{:<10}", r.method.name()).unwrap();
        for (c, (_, v)) in cols.iter().enumerate() {
            let x = v[i].round();
            let mark = if x.abs() == best[c] { "*" } else { " " };
            write!(s, "{:>10}{}", format!("{x:.0}"), mark).unwrap();
        }
        write!(s, "{:>8}{:>8}", format!("{:.1}", r.median_iterations), format!("{}/{}", r.successes, r.successes + r.failures)).unwrap();
        if with_time {
            match r.seconds_per_iter {
                Some(t) => write!(s, "{:>10}", format!("{t:.4}")).unwrap(),
                None => write!(s, "{:>10}", "-").unwrap(),
            }
        }
        s.push('\n');
    }
    s
}

/// Runs every method on one simulated dataset.
pub fn run_replicate(cfg: &ExperimentConfig, model: &ModelSpec, r: usize) -> Vec<ReplicateResult> {
    let data = simulate(model.as_ref(), &cfg.theta_true, cfg.n, data_seed(cfg.seed, r));
    cfg.methods
        .iter()
        .map(|&method| {
            let failed = |message: String| ReplicateResult {
                replicate: r,
                method,
                outcome: Outcome::Failed { message },
                trace: None,
            };
            let y = match &data {
                Ok((_, y)) => y,
                Err(e) => return failed(format!("simulation: {e}")),
            };
            let ocfg = match cfg.optimizer_config(method, r) {
                Ok(c) => c,
                Err(e) => return failed(e.to_string()),
            };
            match newton_solve(model.as_ref(), y, &ocfg) {
                Ok(trace) => {
                    let mut theta = trace.theta.clone();
                    if cfg.mirrors_theta1() {
                        theta[0] = theta[0].abs();
                    }
                    ReplicateResult {
                        replicate: r,
                        method,
                        outcome: Outcome::Success {
                            theta,
                            iterations: trace.iterations(),
                            converged: trace.converged,
                            stop: trace.stop.as_str().to_string(),
                        },
                        trace: Some(trace),
                    }
                }
                Err(e) => failed(e.to_string()),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub results: Vec<ReplicateResult>,
    pub rows: Vec<BenchmarkRow>,
}

/// Runs all replicates, on `jobs` worker threads when given.
///
/// When `out` is set the result files are written there; per-replicate trace
/// files are written as each replicate finishes.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>, jobs: Option<usize>) -> Result<ExperimentOutput> {
    let model = cfg.validate()?;
    if let Some(dir) = out {
        prepare_dir(dir)?;
    }
    let work = |r: usize| -> Result<Vec<ReplicateResult>> {
        let res = run_replicate(cfg, &model, r);
        if let Some(dir) = out {
            for rr in &res {
                if let Some(tr) = &rr.trace {
                    write_trace(&dir.join("traces"), rr.replicate, tr)?;
                }
            }
        }
        Ok(res)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let per_rep: Vec<Vec<ReplicateResult>> =
        pool.install(|| (0..cfg.replicates).into_par_iter().map(work).collect::<Result<_>>())?;
    let results: Vec<ReplicateResult> = per_rep.into_iter().flatten().collect();
    let rows = summarize_all(&cfg.methods, &cfg.theta_true, &results);
    if let Some(dir) = out {
        write_outputs(dir, cfg, &results, &rows)?;
    }
    Ok(ExperimentOutput { results, rows })
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("traces"))
        .map_err(|e| Error::Config(format!("output directory {} is not writable: {e}", dir.display())))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"")
        .map_err(|e| Error::Config(format!("output directory {} is not writable: {e}", dir.display())))?;
    fs::remove_file(probe)?;
    Ok(())
}

/// Writes `bytes` to a temporary sibling and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn csv_bytes(f: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    f(&mut w)?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn theta_headers(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("theta_{j}")).collect()
}

pub fn trace_file_name(method: Method, r: usize) -> String {
    format!("{}_rep{r}.csv", method.name())
}

/// Trace rows without wall-clock time, so the file is reproducible.
pub fn write_trace(dir: &Path, r: usize, trace: &NewtonTrace) -> Result<()> {
    let p = trace.theta.len();
    let bytes = csv_bytes(|w| {
        let mut header = vec!["method".to_string(), "k".into()];
        header.extend(theta_headers(p));
        header.extend(["loglik", "grad_norm", "step", "repaired", "fallback"].map(String::from));
        w.write_record(&header)?;
        for e in &trace.iterates {
            let mut rec = vec![trace.method.name().to_string(), e.k.to_string()];
            rec.extend(e.theta.iter().map(|v| v.to_string()));
            rec.extend([
                e.loglik.to_string(),
                e.grad_norm.to_string(),
                e.step.to_string(),
                e.repaired.to_string(),
                e.fallback.to_string(),
            ]);
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    write_atomic(&dir.join(trace_file_name(trace.method, r)), &bytes)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Metadata {
    pub schema_version: u32,
    pub crate_version: String,
    pub rng: String,
    pub config: ExperimentConfig,
    pub data_seeds: Vec<u64>,
    pub method_seeds: BTreeMap<String, Vec<u64>>,
    /// The full optimizer settings used for replicate 0 of each method.
    pub optimizer: BTreeMap<String, String>,
}

fn write_outputs(dir: &Path, cfg: &ExperimentConfig, results: &[ReplicateResult], rows: &[BenchmarkRow]) -> Result<()> {
    let p = cfg.theta_true.len();

    let estimates = csv_bytes(|w| {
        let mut header = vec!["replicate".to_string(), "method".into(), "status".into()];
        header.extend(theta_headers(p));
        header.extend(["iterations", "converged", "stop", "message"].map(String::from));
        w.write_record(&header)?;
        for r in results {
            let mut rec = vec![r.replicate.to_string(), r.method.name().to_string()];
            match &r.outcome {
                Outcome::Success { theta, iterations, converged, stop } => {
                    rec.push("ok".into());
                    rec.extend(theta.iter().map(|v| v.to_string()));
                    rec.extend([iterations.to_string(), converged.to_string(), stop.clone(), String::new()]);
                }
                Outcome::Failed { message } => {
                    rec.push("failed".into());
                    rec.extend(std::iter::repeat_n(String::new(), p + 3));
                    rec.push(message.clone());
                }
            }
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    write_atomic(&dir.join("estimates.csv"), &estimates)?;

    let table = csv_bytes(|w| {
        w.write_record(["method", "parameter", "theta_true", "bias", "mse", "successes", "failures", "median_iterations"])?;
        for row in rows {
            for j in 0..p {
                w.write_record([
                    row.method.name().to_string(),
                    format!("theta_{}", j + 1),
                    cfg.theta_true[j].to_string(),
                    row.bias[j].to_string(),
                    row.mse[j].to_string(),
                    row.successes.to_string(),
                    row.failures.to_string(),
                    row.median_iterations.to_string(),
                ])?;
            }
        }
        Ok(())
    })?;
    write_atomic(&dir.join("table.csv"), &table)?;

    let untimed: Vec<BenchmarkRow> = rows.iter().cloned().map(|r| BenchmarkRow { seconds_per_iter: None, ..r }).collect();
    let title = format!("{} (N = {}, {} replicates)", cfg.model, cfg.n, cfg.replicates);
    write_atomic(&dir.join("table.txt"), emit_table(&untimed, &title).as_bytes())?;

    let timings = csv_bytes(|w| {
        w.write_record(["replicate", "method", "iterations", "total_seconds", "seconds_per_iter"])?;
        for r in results {
            if let Some(tr) = &r.trace {
                w.write_record([
                    r.replicate.to_string(),
                    r.method.name().to_string(),
                    tr.iterations().to_string(),
                    tr.total_seconds.to_string(),
                    tr.seconds_per_iteration().to_string(),
                ])?;
            }
        }
        Ok(())
    })?;
    write_atomic(&dir.join("timings.csv"), &timings)?;

    let mut method_seeds = BTreeMap::new();
    let mut optimizer = BTreeMap::new();
    for &m in &cfg.methods {
        method_seeds.insert(m.name().to_string(), (0..cfg.replicates).map(|r| method_seed(cfg.seed, r, m)).collect());
        optimizer.insert(m.name().to_string(), format!("{:?}", cfg.optimizer_config(m, 0)?));
    }
    let meta = Metadata {
        schema_version: SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        rng: RNG_NAME.to_string(),
        config: cfg.clone(),
        data_seeds: (0..cfg.replicates).map(|r| data_seed(cfg.seed, r)).collect(),
        method_seeds,
        optimizer,
    };
    write_atomic(&dir.join("metadata.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(())
}

/// Recomputes the summary table from a results directory, including timing
/// when `timings.csv` is present.
pub fn load_table(dir: &Path) -> Result<(ExperimentConfig, Vec<BenchmarkRow>)> {
    let meta: Metadata = serde_json::from_str(&fs::read_to_string(dir.join("metadata.json"))?)?;
    let cfg = meta.config;
    let p = cfg.theta_true.len();
    let mut rdr = csv::Reader::from_path(dir.join("estimates.csv"))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("estimates.csv lacks column {name}")))
    };
    let (c_rep, c_method, c_status, c_iter) = (col("replicate")?, col("method")?, col("status")?, col("iterations")?);
    let c_theta: Vec<usize> = theta_headers(p).iter().map(|h| col(h)).collect::<Result<_>>()?;
    let parse_err = |what: &str| Error::Config(format!("estimates.csv: malformed {what}"));

    let mut timing: BTreeMap<(usize, Method), f64> = BTreeMap::new();
    if let Ok(mut t) = csv::Reader::from_path(dir.join("timings.csv")) {
        for rec in t.records() {
            let rec = rec?;
            let r: usize = rec[0].parse().map_err(|_| parse_err("timing replicate"))?;
            let m: Method = rec[1].parse()?;
            let spi: f64 = rec[4].parse().map_err(|_| parse_err("timing"))?;
            timing.insert((r, m), spi);
        }
    }

    let mut results = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let replicate: usize = rec[c_rep].parse().map_err(|_| parse_err("replicate"))?;
        let method: Method = rec[c_method].parse()?;
        let outcome = if &rec[c_status] == "ok" {
            Outcome::Success {
                theta: c_theta
                    .iter()
                    .map(|&c| rec[c].parse().map_err(|_| parse_err("theta")))
                    .collect::<Result<_>>()?,
                iterations: rec[c_iter].parse().map_err(|_| parse_err("iterations"))?,
                converged: false,
                stop: String::new(),
            }
        } else {
            Outcome::Failed { message: String::new() }
        };
        results.push((replicate, method, outcome));
    }
    let rows = cfg
        .methods
        .iter()
        .map(|&m| {
            let rs: Vec<ReplicateResult> = results
                .iter()
                .filter(|(_, mm, _)| *mm == m)
                .map(|(r, m, o)| ReplicateResult { replicate: *r, method: *m, outcome: o.clone(), trace: None })
                .collect();
            let mut row = summarize(m, &cfg.theta_true, &rs.iter().collect::<Vec<_>>());
            let ts: Vec<f64> = rs.iter().filter_map(|r| timing.get(&(r.replicate, m)).copied()).collect();
            row.seconds_per_iter = (!ts.is_empty()).then(|| ts.iter().sum::<f64>() / ts.len() as f64);
            row
        })
        .collect();
    Ok((cfg, rows))
}

/// Writes a simulated dataset as `t, x_1.., y_1..` rows.
pub fn write_dataset(path: &Path, x: &StateTrajectory, y: &ObservationSequence) -> Result<()> {
    let bytes = csv_bytes(|w| {
        let mut header = vec!["t".to_string()];
        header.extend((1..=x.dim()).map(|i| format!("x_{i}")));
        header.extend((1..=y.dim()).map(|i| format!("y_{i}")));
        w.write_record(&header)?;
        for t in 0..y.len() {
            let mut rec = vec![(t + 1).to_string()];
            rec.extend(x.get(t).iter().chain(y.get(t)).map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    write_atomic(path, &bytes)
}

/// Reads the `y_*` columns of a dataset file.
pub fn read_observations(path: &Path) -> Result<ObservationSequence> {
    let mut rdr = csv::Reader::from_path(path)?;
    let cols: Vec<usize> = rdr
        .headers()?
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("y_"))
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return Err(Error::Config(format!("{} has no y_* columns", path.display())));
    }
    let mut data = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        for &c in &cols {
            data.push(
                rec[c]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("{}: malformed value '{}'", path.display(), &rec[c])))?,
            );
        }
    }
    if data.is_empty() {
        return Err(Error::Config(format!("{} has no rows", path.display())));
    }
    Series::new(cols.len(), data)
}
