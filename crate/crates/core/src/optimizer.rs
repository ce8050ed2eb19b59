//! Newton's method on estimated derivatives, θ_{k+1} = θ_k − ε_k Ĥ⁻¹ Ĝ, and
//! the finite-difference quasi-Newton baseline.
//!
//! Everything here maximizes ℓ. Trace entry `k` holds θ_k and the estimates
//! computed there; the step taken from θ_k uses iteration number k+1 in the
//! step-size schedule, so the first step of a stochastic run has ε = 1.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::ekf;
use crate::inference::{finite_difference_gradient, linearization_estimate, particle_estimate, repair_hessian, DerivativeEstimate};
use crate::linalg::cholesky;
use crate::map_smoother::GaussNewtonOptions;
use crate::models::{ObservationSequence, StateSpaceModel};
use crate::particle::{SmootherConfig, SmootherKind};
use crate::rng::derive_seed;

/// Armijo sufficient-increase constant.
pub const ARMIJO_C: f64 = 1e-4;
/// Backtracking tries ε = 1, ½, …, 2^-MAX_HALVINGS.
pub const MAX_HALVINGS: i32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ALG2")]
    Alg2,
    #[serde(rename = "ALG3FL")]
    Alg3Fl,
    #[serde(rename = "ALG3FFBSi")]
    Alg3Ffbsi,
    #[serde(rename = "NUM")]
    Num,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Alg2, Method::Alg3Fl, Method::Alg3Ffbsi, Method::Num];

    pub fn name(self) -> &'static str {
        match self {
            Method::Alg2 => "ALG2",
            Method::Alg3Fl => "ALG3FL",
            Method::Alg3Ffbsi => "ALG3FFBSi",
            Method::Num => "NUM",
        }
    }

    /// Particle back-ends give noisy derivatives.
    pub fn is_stochastic(self) -> bool {
        matches!(self, Method::Alg3Fl | Method::Alg3Ffbsi)
    }

    pub fn default_max_iters(self) -> usize {
        if self.is_stochastic() {
            500
        } else {
            100
        }
    }

    pub fn default_step_policy(self) -> StepPolicy {
        if self.is_stochastic() {
            StepPolicy::Stochastic { exponent: 2.0 / 3.0 }
        } else {
            StepPolicy::LineSearch
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method '{s}', expected ALG2, ALG3FL, ALG3FFBSi or NUM")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepPolicy {
    /// Largest ε in {1, ½, …, 2⁻²⁰} with Armijo increase of ℓ̂.
    LineSearch,
    /// ε_k = k^(−exponent).
    Stochastic { exponent: f64 },
}

impl FromStr for StepPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line-search" => Ok(StepPolicy::LineSearch),
            "stochastic" => Ok(StepPolicy::Stochastic { exponent: 2.0 / 3.0 }),
            other => match other.strip_prefix("stochastic:").map(str::parse::<f64>) {
                Some(Ok(e)) if e > 0.0 => Ok(StepPolicy::Stochastic { exponent: e }),
                _ => Err(Error::Config(format!(
                    "unknown step policy '{other}', expected line-search, stochastic or stochastic:<exponent>"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub method: Method,
    pub theta0: Vec<f64>,
    /// Maximum number of parameter updates.
    pub max_iters: usize,
    pub step_policy: StepPolicy,
    /// Deterministic back-ends stop once ‖Ĝ‖_∞ ≤ grad_tol.
    pub grad_tol: f64,
    /// Stochastic back-ends stop after 3 consecutive updates with ‖Δθ‖_∞ ≤ param_tol.
    pub param_tol: f64,
    pub smoother: SmootherConfig,
    pub gauss_newton: GaussNewtonOptions,
    /// Relative finite-difference step for NUM.
    pub fd_step: f64,
    pub seed: u64,
}

impl OptimizerConfig {
    /// Method defaults: K = 100 and line search for ALG2/NUM, K = 500 and
    /// ε_k = k^(−2/3) for the particle methods.
    pub fn new(method: Method, theta0: Vec<f64>) -> Self {
        let smoother = SmootherConfig {
            kind: if method == Method::Alg3Ffbsi {
                SmootherKind::Ffbsi
            } else {
                SmootherKind::FixedLag
            },
            ..SmootherConfig::default()
        };
        Self {
            method,
            theta0,
            max_iters: method.default_max_iters(),
            step_policy: method.default_step_policy(),
            grad_tol: 1e-2,
            param_tol: 1e-3,
            smoother,
            gauss_newton: GaussNewtonOptions::default(),
            fd_step: 1e-5,
            seed: 0,
        }
    }

    pub fn validate(&self, model: &dyn StateSpaceModel, n: usize) -> Result<()> {
        if self.theta0.len() != model.n_params() {
            return Err(Error::Dimension(format!(
                "θ0 has {} entries, model {} has {} parameters",
                self.theta0.len(),
                model.name(),
                model.n_params()
            )));
        }
        if self.theta0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameters("θ0 is not finite".into()));
        }
        if !(self.grad_tol > 0.0) || !(self.param_tol > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::Config("tolerances and the finite-difference step must be positive".into()));
        }
        if let StepPolicy::Stochastic { exponent } = self.step_policy {
            if !(exponent > 0.0) {
                return Err(Error::Config("step exponent must be positive".into()));
            }
        }
        if self.method.is_stochastic() {
            self.smoother.validate(n)?;
        } else if model.additive_gaussian().is_none() {
            return Err(Error::MissingStructure("ALG2 and NUM"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub k: usize,
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub grad_norm: f64,
    /// Step length taken from θ_k; 0 when the run stopped here.
    pub step: f64,
    /// The Hessian estimate was repaired or replaced by a gradient step.
    pub repaired: bool,
    pub fallback: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
    LineSearchExhausted,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::GradientTolerance => "gradient-tolerance",
            StopReason::StepTolerance => "step-tolerance",
            StopReason::MaxIterations => "max-iterations",
            StopReason::LineSearchExhausted => "line-search-exhausted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NewtonTrace {
    pub method: Method,
    pub iterates: Vec<TraceEntry>,
    pub theta: Vec<f64>,
    pub converged: bool,
    pub stop: StopReason,
    pub total_seconds: f64,
}

impl NewtonTrace {
    /// Parameter updates applied.
    pub fn iterations(&self) -> usize {
        self.iterates.iter().filter(|e| e.step > 0.0).count()
    }

    pub fn seconds_per_iteration(&self) -> f64 {
        self.total_seconds / self.iterates.len().max(1) as f64
    }
}

/// ε_k for iteration number `k` ≥ 1. The line-search policy needs ℓ̂ at θ
/// (`loglik0`) and the directional derivative Ĝᵀd (`slope`).
pub fn step_length(
    policy: StepPolicy,
    k: usize,
    theta: &[f64],
    direction: &[f64],
    loglik0: f64,
    slope: f64,
    mut loglik: impl FnMut(&[f64]) -> f64,
) -> Result<f64> {
    if direction.iter().any(|d| !d.is_finite()) {
        return Err(Error::Config("search direction is not finite".into()));
    }
    match policy {
        StepPolicy::Stochastic { exponent } => Ok((k.max(1) as f64).powf(-exponent)),
        StepPolicy::LineSearch => {
            let mut probe = vec![0.0; theta.len()];
            for i in 0..=MAX_HALVINGS {
                let eps = 0.5f64.powi(i);
                for ((p, t), d) in probe.iter_mut().zip(theta).zip(direction) {
                    *p = t + eps * d;
                }
                let l = loglik(&probe);
                if l.is_finite() && l >= loglik0 + ARMIJO_C * eps * slope {
                    return Ok(eps);
                }
            }
            Err(Error::ZeroStep)
        }
    }
}

/// Newton ascent direction −Ĥ⁻¹Ĝ from the repaired Hessian, or the
/// normalized gradient when the repaired matrix cannot be factored.
fn newton_direction(est: &DerivativeEstimate) -> (DVector<f64>, bool, bool) {
    let (h, repaired) = repair_hessian(&est.hessian);
    match cholesky(&(-h)) {
        Some(c) => {
            let d = c.solve(&est.gradient);
            if d.iter().all(|v| v.is_finite()) {
                return (d, repaired, false);
            }
            (gradient_step(&est.gradient), repaired, true)
        }
        None => (gradient_step(&est.gradient), repaired, true),
    }
}

fn gradient_step(g: &DVector<f64>) -> DVector<f64> {
    let n = g.norm();
    if n > 0.0 {
        g / n
    } else {
        g.clone()
    }
}

fn ekf_loglik(model: &dyn StateSpaceModel, y: &ObservationSequence, theta: &[f64]) -> f64 {
    ekf(model, theta, y).map(|f| f.loglik).unwrap_or(f64::NEG_INFINITY)
}

/// Runs the configured method. NUM is delegated to [`quasi_newton_num`].
pub fn newton_solve(model: &dyn StateSpaceModel, y: &ObservationSequence, cfg: &OptimizerConfig) -> Result<NewtonTrace> {
    cfg.validate(model, y.len())?;
    if cfg.method == Method::Num {
        return quasi_newton_num(model, y, cfg);
    }
    let start = Instant::now();
    let stochastic = cfg.method.is_stochastic();
    let mut theta = cfg.theta0.clone();
    let mut iterates = Vec::new();
    let mut small_steps = 0;
    let mut k = 0;
    let (stop, final_theta) = loop {
        let t0 = Instant::now();
        let est = if stochastic {
            let seed = derive_seed(cfg.seed, &["newton".into(), cfg.method.name().into(), k.into()]);
            particle_estimate(model, &theta, y, &cfg.smoother, seed)
        } else {
            linearization_estimate(model, &theta, y, cfg.gauss_newton)
        }
        .map_err(|e| e.at_iteration(k))?;
        let grad_norm = est.gradient.amax();
        let mut entry = TraceEntry {
            k,
            theta: theta.clone(),
            loglik: est.loglik,
            grad_norm,
            step: 0.0,
            repaired: false,
            fallback: false,
            seconds: 0.0,
        };
        let finish = |mut entry: TraceEntry, iterates: &mut Vec<TraceEntry>| {
            entry.seconds = t0.elapsed().as_secs_f64();
            iterates.push(entry);
        };
        if !stochastic && grad_norm <= cfg.grad_tol {
            finish(entry, &mut iterates);
            break (StopReason::GradientTolerance, theta);
        }
        if k >= cfg.max_iters {
            finish(entry, &mut iterates);
            break (StopReason::MaxIterations, theta);
        }
        let (dir, repaired, fallback) = newton_direction(&est);
        entry.repaired = repaired;
        entry.fallback = fallback;
        let slope = est.gradient.dot(&dir);
        let eps = match step_length(cfg.step_policy, k + 1, &theta, dir.as_slice(), est.loglik, slope, |th| {
            ekf_loglik(model, y, th)
        }) {
            Ok(e) => e,
            Err(Error::ZeroStep) => {
                finish(entry, &mut iterates);
                break (StopReason::LineSearchExhausted, theta);
            }
            Err(e) => return Err(e.at_iteration(k)),
        };
        entry.step = eps;
        let next: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, d)| t + eps * d).collect();
        let change = theta.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        finish(entry, &mut iterates);
        theta = next;
        k += 1;
        if stochastic {
            small_steps = if change <= cfg.param_tol { small_steps + 1 } else { 0 };
            if small_steps >= 3 {
                break (StopReason::StepTolerance, theta);
            }
        }
    };
    if !stochastic && cfg.step_policy == StepPolicy::LineSearch {
        debug_assert!(iterates.windows(2).all(|w| w[1].loglik >= w[0].loglik));
    }
    Ok(NewtonTrace {
        method: cfg.method,
        iterates,
        theta: final_theta,
        converged: matches!(stop, StopReason::GradientTolerance | StopReason::StepTolerance),
        stop,
        total_seconds: start.elapsed().as_secs_f64(),
    })
}

/// BFGS on the EKF log-likelihood with central-difference gradients.
///
/// The inverse-Hessian approximation starts at (0.1/‖G₀‖₂) I, is rescaled by
/// sᵀy/yᵀy before the first update, and is only updated when sᵀy is safely
/// positive.
pub fn quasi_newton_num(model: &dyn StateSpaceModel, y: &ObservationSequence, cfg: &OptimizerConfig) -> Result<NewtonTrace> {
    cfg.validate(model, y.len())?;
    if model.additive_gaussian().is_none() {
        return Err(Error::MissingStructure("NUM"));
    }
    let start = Instant::now();
    let p = cfg.theta0.len();
    let loglik = |th: &[f64]| ekf(model, th, y).map(|f| f.loglik);
    let gradient = |th: &[f64]| finite_difference_gradient(loglik, th, cfg.fd_step);

    let mut theta = DVector::from_column_slice(&cfg.theta0);
    let t0 = Instant::now();
    let mut ll = loglik(theta.as_slice()).map_err(|e| e.at_iteration(0))?;
    let mut g = gradient(theta.as_slice()).map_err(|e| e.at_iteration(0))?;
    let initial_scale = |g: &DVector<f64>| {
        let n = g.norm();
        if n > 0.0 {
            0.1 / n
        } else {
            1.0
        }
    };
    let mut hinv = DMatrix::identity(p, p) * initial_scale(&g);
    let mut updated = false;
    let mut iterates = Vec::new();
    let mut k = 0;
    // time spent before the loop is charged to the first entry
    let mut carry = t0.elapsed().as_secs_f64();
    let stop = loop {
        let t0 = Instant::now();
        let mut entry = TraceEntry {
            k,
            theta: theta.as_slice().to_vec(),
            loglik: ll,
            grad_norm: g.amax(),
            step: 0.0,
            repaired: false,
            fallback: false,
            seconds: carry,
        };
        carry = 0.0;
        if entry.grad_norm <= cfg.grad_tol {
            iterates.push(entry);
            break StopReason::GradientTolerance;
        }
        if k >= cfg.max_iters {
            iterates.push(entry);
            break StopReason::MaxIterations;
        }
        let mut dir = &hinv * &g;
        if g.dot(&dir) <= 0.0 {
            hinv = DMatrix::identity(p, p) * initial_scale(&g);
            updated = false;
            dir = &hinv * &g;
            entry.fallback = true;
        }
        let slope = g.dot(&dir);
        let eps = match step_length(StepPolicy::LineSearch, k + 1, theta.as_slice(), dir.as_slice(), ll, slope, |th| {
            loglik(th).unwrap_or(f64::NEG_INFINITY)
        }) {
            Ok(e) => e,
            Err(Error::ZeroStep) => {
                iterates.push(entry);
                break StopReason::LineSearchExhausted;
            }
            Err(e) => return Err(e.at_iteration(k)),
        };
        let next = &theta + &dir * eps;
        let ll_next = loglik(next.as_slice()).map_err(|e| e.at_iteration(k + 1))?;
        let g_next = gradient(next.as_slice()).map_err(|e| e.at_iteration(k + 1))?;
        let s = &next - &theta;
        // curvature of −ℓ
        let yv = &g - &g_next;
        let sy = s.dot(&yv);
        if sy > 1e-10 * s.norm() * yv.norm() {
            if !updated {
                hinv = DMatrix::identity(p, p) * (sy / yv.norm_squared());
                updated = true;
            }
            let rho = 1.0 / sy;
            let left = DMatrix::identity(p, p) - &s * yv.transpose() * rho;
            hinv = &left * &hinv * left.transpose() + &s * s.transpose() * rho;
        }
        entry.step = eps;
        entry.seconds += t0.elapsed().as_secs_f64();
        iterates.push(entry);
        theta = next;
        ll = ll_next;
        g = g_next;
        k += 1;
    };
    debug_assert!(iterates.windows(2).all(|w| w[1].loglik >= w[0].loglik));
    Ok(NewtonTrace {
        method: Method::Num,
        iterates,
        theta: theta.as_slice().to_vec(),
        converged: stop == StopReason::GradientTolerance,
        stop,
        total_seconds: start.elapsed().as_secs_f64(),
    })
}
