//! Python bindings: models, filters, smoothers, derivative estimates, the
//! Newton solver and the benchmark harness.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ssm_newton::bench::{emit_table, run_experiment, ExperimentConfig};
use ssm_newton::gaussian::ekf;
use ssm_newton::inference::{linearization_estimate, particle_estimate, DerivativeEstimate};
use ssm_newton::map_smoother::{map_smoother, GaussNewtonOptions};
use ssm_newton::models::{model_by_name, simulate, ModelSpec, Series, MODEL_NAMES};
use ssm_newton::optimizer::{newton_solve, Method, NewtonTrace, OptimizerConfig, StepPolicy};
use ssm_newton::particle::{bootstrap_pf, SmootherConfig, SmootherKind};
use ssm_newton::rng::rng_from_seed;
use ssm_newton::Error;

fn to_py(e: Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Accepts a flat list of scalars or a list of equal-length rows.
fn series(obj: &Bound<'_, PyAny>) -> PyResult<Series> {
    if let Ok(v) = obj.extract::<Vec<f64>>() {
        return Ok(Series::from_scalars(&v));
    }
    let rows: Vec<Vec<f64>> = obj.extract()?;
    let dim = rows.first().map_or(0, Vec::len);
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("observations must be non-empty rows of equal length"));
    }
    Series::new(dim, rows.concat()).map_err(to_py)
}

fn rows(s: &Series) -> Vec<Vec<f64>> {
    s.iter().map(<[f64]>::to_vec).collect()
}

fn smoother_config(kind: SmootherKind, particles: Option<usize>, lag: Option<usize>, mbar: Option<usize>, mlimit: Option<usize>) -> SmootherConfig {
    let mut c = SmootherConfig { kind, ..SmootherConfig::default() };
    if let Some(v) = particles {
        c.particles = v;
    }
    if let Some(v) = lag {
        c.lag = v;
    }
    if let Some(v) = mbar {
        c.backward = v;
    }
    if let Some(v) = mlimit {
        c.m_limit = v;
    }
    c
}

fn estimate_dict<'py>(py: Python<'py>, est: &DerivativeEstimate) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("loglik", est.loglik)?;
    d.set_item("gradient", est.gradient.iter().copied().collect::<Vec<f64>>())?;
    let p = est.hessian.nrows();
    let h: Vec<Vec<f64>> = (0..p).map(|i| (0..p).map(|j| est.hessian[(i, j)]).collect()).collect();
    d.set_item("hessian", h)?;
    Ok(d)
}

/// A state-space model looked up by name: "model1", "model2" or "lgss".
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: ModelSpec,
    name: String,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        Ok(Self { inner: model_by_name(name, None).map_err(to_py)?, name: name.to_string() })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.name
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    /// Returns (states, observations) as lists of rows.
    #[pyo3(signature = (theta, n, seed = 0))]
    fn simulate(&self, theta: Vec<f64>, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (x, y) = simulate(self.inner.as_ref(), &theta, n, seed).map_err(to_py)?;
        Ok((rows(&x), rows(&y)))
    }

    /// Extended Kalman filter log-likelihood (exact on linear models).
    fn ekf_loglik(&self, theta: Vec<f64>, y: &Bound<'_, PyAny>) -> PyResult<f64> {
        Ok(ekf(self.inner.as_ref(), &theta, &series(y)?).map_err(to_py)?.loglik)
    }

    /// Bootstrap particle filter log-likelihood estimate.
    #[pyo3(signature = (theta, y, particles = 1000, seed = 0))]
    fn pf_loglik(&self, theta: Vec<f64>, y: &Bound<'_, PyAny>, particles: usize, seed: u64) -> PyResult<f64> {
        let ps = bootstrap_pf(self.inner.as_ref(), &theta, &series(y)?, particles, &mut rng_from_seed(seed)).map_err(to_py)?;
        Ok(ps.loglik)
    }

    /// MAP smoother: dict with smoothed means, covariances and lag-one
    /// cross-covariances, each as nested lists.
    fn smooth<'py>(&self, py: Python<'py>, theta: Vec<f64>, y: &Bound<'_, PyAny>) -> PyResult<Bound<'py, PyDict>> {
        let (ll, sol, sm) = map_smoother(self.inner.as_ref(), &theta, &series(y)?, GaussNewtonOptions::default()).map_err(to_py)?;
        let mat = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
        };
        let d = PyDict::new(py);
        d.set_item("ekf_loglik", ll)?;
        d.set_item("iterations", sol.iterations)?;
        d.set_item("means", sm.means.iter().map(|v| v.iter().copied().collect()).collect::<Vec<Vec<f64>>>())?;
        d.set_item("covs", sm.covs.iter().map(mat).collect::<Vec<_>>())?;
        d.set_item("cross_covs", sm.cross_covs.iter().map(mat).collect::<Vec<_>>())?;
        Ok(d)
    }

    /// Log-likelihood, gradient and Hessian estimates at θ.
    /// `backend` is "linearization", "fixed-lag" or "ffbsi".
    #[pyo3(signature = (theta, y, backend = "linearization", particles = None, lag = None, mbar = None, mlimit = None, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn derivatives<'py>(
        &self,
        py: Python<'py>,
        theta: Vec<f64>,
        y: &Bound<'_, PyAny>,
        backend: &str,
        particles: Option<usize>,
        lag: Option<usize>,
        mbar: Option<usize>,
        mlimit: Option<usize>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let y = series(y)?;
        let m = self.inner.as_ref();
        let est = match backend {
            "linearization" => linearization_estimate(m, &theta, &y, GaussNewtonOptions::default()),
            "fixed-lag" | "ffbsi" => {
                let kind = if backend == "ffbsi" { SmootherKind::Ffbsi } else { SmootherKind::FixedLag };
                particle_estimate(m, &theta, &y, &smoother_config(kind, particles, lag, mbar, mlimit), seed)
            }
            other => return Err(PyValueError::new_err(format!("unknown backend '{other}'"))),
        }
        .map_err(to_py)?;
        estimate_dict(py, &est)
    }

    fn __repr__(&self) -> String {
        format!("Model('{}')", self.name)
    }
}

/// Result of a Newton solve.
#[pyclass(name = "NewtonTrace", frozen)]
struct PyTrace {
    inner: NewtonTrace,
}

#[pymethods]
impl PyTrace {
    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.name()
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.inner.theta.clone()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn stop(&self) -> &'static str {
        self.inner.stop.as_str()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations()
    }

    #[getter]
    fn total_seconds(&self) -> f64 {
        self.inner.total_seconds
    }

    /// One dict per iterate: k, theta, loglik, grad_norm, step, seconds.
    fn iterates<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .iterates
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("k", e.k)?;
                d.set_item("theta", e.theta.clone())?;
                d.set_item("loglik", e.loglik)?;
                d.set_item("grad_norm", e.grad_norm)?;
                d.set_item("step", e.step)?;
                d.set_item("seconds", e.seconds)?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "NewtonTrace(method={}, theta={:?}, iterations={}, stop={})",
            self.inner.method,
            self.inner.theta,
            self.inner.iterations(),
            self.inner.stop.as_str()
        )
    }
}

/// Runs one method ("ALG2", "ALG3FL", "ALG3FFBSi" or "NUM") from θ0.
#[pyfunction]
#[pyo3(signature = (model, method, y, theta0, max_iters = None, grad_tol = None, param_tol = None,
                    particles = None, lag = None, mbar = None, mlimit = None, step_policy = None, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn estimate(
    model: &PyModel,
    method: &str,
    y: &Bound<'_, PyAny>,
    theta0: Vec<f64>,
    max_iters: Option<usize>,
    grad_tol: Option<f64>,
    param_tol: Option<f64>,
    particles: Option<usize>,
    lag: Option<usize>,
    mbar: Option<usize>,
    mlimit: Option<usize>,
    step_policy: Option<&str>,
    seed: u64,
) -> PyResult<PyTrace> {
    let method: Method = method.parse().map_err(to_py)?;
    let y = series(y)?;
    let mut cfg = OptimizerConfig::new(method, theta0);
    if let Some(v) = max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = grad_tol {
        cfg.grad_tol = v;
    }
    if let Some(v) = param_tol {
        cfg.param_tol = v;
    }
    if let Some(v) = step_policy {
        cfg.step_policy = v.parse::<StepPolicy>().map_err(to_py)?;
    }
    cfg.smoother = smoother_config(cfg.smoother.kind, particles, lag, mbar, mlimit);
    cfg.seed = seed;
    let inner = newton_solve(model.inner.as_ref(), &y, &cfg).map_err(to_py)?;
    Ok(PyTrace { inner })
}

/// Runs a benchmark from TOML text and returns the summary table.
#[pyfunction]
#[pyo3(signature = (config, out = None, jobs = None))]
fn run_benchmark(config: &str, out: Option<PathBuf>, jobs: Option<usize>) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml(config).map_err(to_py)?;
    let res = run_experiment(&cfg, out.as_deref(), jobs).map_err(to_py)?;
    let title = format!("{} (N = {}, {} replicates)", cfg.model, cfg.n, cfg.replicates);
    Ok(emit_table(&res.rows, &title))
}

#[pymodule]
fn ssm_newton_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add("MODELS", MODEL_NAMES.to_vec())?;
    m.add("METHODS", Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>())?;
    Ok(())
}
