//! MAP trajectory smoothing for additive-Gaussian models.
//!
//! The complete-data log-likelihood of an additive-Gaussian model is, up to
//! θ-dependent constants, −½‖r(x)‖² for the stacked whitened residual
//!
//! ```text
//! r = [ L_P1⁻¹ (x_1 − μ);  L_Q⁻¹ (x_{t+1} − f(x_t)), t < N;  L_R⁻¹ (y_t − g(x_t)) ]
//! ```
//!
//! Its Gauss-Newton matrix JᵀJ couples only neighbouring states and is block
//! tridiagonal, so both the Newton solve and the extraction of the smoothed
//! marginal and lag-one covariances (diagonal and first off-diagonal blocks of
//! (JᵀJ)⁻¹) cost O(N d³).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::gaussian::{ekf, SmoothedMoments};
use crate::linalg::{cholesky, symmetrize};
use crate::models::{AdditiveGaussian, ObservationSequence, StateSpaceModel};

/// Symmetric block-tridiagonal matrix. `upper[t]` is the (t, t+1) block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonalMatrix {
    pub diag: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
}

impl BlockTridiagonalMatrix {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            diag: vec![DMatrix::zeros(d, d); n],
            upper: vec![DMatrix::zeros(d, d); n.saturating_sub(1)],
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn block_dim(&self) -> usize {
        self.diag.first().map(|b| b.nrows()).unwrap_or(0)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n_blocks();
        let d = self.block_dim();
        let mut m = DMatrix::zeros(n * d, n * d);
        for (t, b) in self.diag.iter().enumerate() {
            m.view_mut((t * d, t * d), (d, d)).copy_from(b);
        }
        for (t, b) in self.upper.iter().enumerate() {
            m.view_mut((t * d, (t + 1) * d), (d, d)).copy_from(b);
            m.view_mut(((t + 1) * d, t * d), (d, d)).copy_from(&b.transpose());
        }
        m
    }

    /// Block Cholesky through the Schur complements
    /// S_1 = D_1, S_{t+1} = D_{t+1} − E_tᵀ S_t⁻¹ E_t.
    pub fn factor(&self) -> Result<BlockFactor> {
        let n = self.n_blocks();
        let mut schur: Vec<Cholesky<f64, Dyn>> = Vec::with_capacity(n);
        for t in 0..n {
            let mut s = self.diag[t].clone();
            if t > 0 {
                let e = &self.upper[t - 1];
                let sinv_e = schur[t - 1].solve(e);
                s -= e.transpose() * sinv_e;
            }
            symmetrize(&mut s);
            schur.push(cholesky(&s).ok_or(Error::IndefiniteHessian { block: t })?);
        }
        Ok(BlockFactor {
            schur,
            upper: self.upper.clone(),
        })
    }
}

pub struct BlockFactor {
    schur: Vec<Cholesky<f64, Dyn>>,
    upper: Vec<DMatrix<f64>>,
}

impl BlockFactor {
    /// Solves H z = rhs.
    pub fn solve(&self, rhs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let n = self.schur.len();
        let mut z: Vec<DVector<f64>> = Vec::with_capacity(n);
        for t in 0..n {
            let mut v = rhs[t].clone();
            if t > 0 {
                v -= self.upper[t - 1].transpose() * self.schur[t - 1].solve(&z[t - 1]);
            }
            z.push(v);
        }
        let mut out = vec![DVector::zeros(0); n];
        for t in (0..n).rev() {
            let mut v = z[t].clone();
            if t + 1 < n {
                v -= &self.upper[t] * &out[t + 1];
            }
            out[t] = self.schur[t].solve(&v);
        }
        out
    }

    /// Diagonal blocks and (t, t+1) blocks of H⁻¹:
    /// Σ_N = S_N⁻¹, Σ_{t,t+1} = −S_t⁻¹ E_t Σ_{t+1}, Σ_t = S_t⁻¹ + S_t⁻¹ E_t Σ_{t+1} E_tᵀ S_t⁻¹.
    pub fn selected_inverse(&self) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let n = self.schur.len();
        let mut diag = vec![DMatrix::zeros(0, 0); n];
        let mut upper = vec![DMatrix::zeros(0, 0); n.saturating_sub(1)];
        if n == 0 {
            return (diag, upper);
        }
        diag[n - 1] = self.schur[n - 1].inverse();
        for t in (0..n - 1).rev() {
            let gain = self.schur[t].solve(&self.upper[t]);
            let cross = -(&gain * &diag[t + 1]);
            let mut d = self.schur[t].inverse() - &cross * gain.transpose();
            symmetrize(&mut d);
            diag[t] = d;
            upper[t] = cross;
        }
        (diag, upper)
    }
}

/// Marginal covariances and Cov(x_t, x_{t+1}) from the selected inverse of H.
pub fn extract_smoothed_covariances(
    h: &BlockTridiagonalMatrix,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    Ok(h.factor()?.selected_inverse())
}

/// Residuals, gradient and Gauss-Newton matrix of the MAP objective ½‖r‖².
#[derive(Debug, Clone)]
pub struct ResidualSystem {
    pub residuals: DVector<f64>,
    /// Jᵀ r, one block per time step.
    pub gradient: Vec<DVector<f64>>,
    /// Jᵀ J
    pub hessian: BlockTridiagonalMatrix,
}

impl ResidualSystem {
    pub fn objective(&self) -> f64 {
        0.5 * self.residuals.norm_squared()
    }

    pub fn grad_norm_inf(&self) -> f64 {
        self.gradient.iter().map(|g| g.amax()).fold(0.0, f64::max)
    }
}

struct Whitening {
    p1: Cholesky<f64, Dyn>,
    q: Cholesky<f64, Dyn>,
    r: Cholesky<f64, Dyn>,
    q_inv: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    p1_inv: DMatrix<f64>,
}

impl Whitening {
    fn new(model: &dyn AdditiveGaussian, theta: &[f64]) -> Result<Self> {
        let p1 = cholesky(&model.initial_cov()).ok_or_else(|| Error::InvalidSpec("P1 is not positive definite".into()))?;
        let q = cholesky(&model.process_cov(theta)).ok_or_else(|| Error::InvalidSpec("Q is not positive definite".into()))?;
        let r = cholesky(&model.measurement_cov(theta))
            .ok_or_else(|| Error::InvalidSpec("R is not positive definite".into()))?;
        Ok(Self {
            q_inv: q.inverse(),
            r_inv: r.inverse(),
            p1_inv: p1.inverse(),
            p1,
            q,
            r,
        })
    }

    fn white(chol: &Cholesky<f64, Dyn>, e: &DVector<f64>) -> DVector<f64> {
        chol.l_dirty().solve_lower_triangular(e).expect("triangular solve")
    }
}

fn structure(model: &dyn StateSpaceModel) -> Result<&dyn AdditiveGaussian> {
    model.additive_gaussian().ok_or(Error::MissingStructure("the MAP smoother"))
}

fn check_dims(model: &dyn StateSpaceModel, y: &ObservationSequence, x: &[DVector<f64>]) -> Result<()> {
    if x.len() != y.len() || x.iter().any(|v| v.len() != model.state_dim()) {
        return Err(Error::Dimension(format!(
            "trajectory of length {} does not match {} observations of state dimension {}",
            x.len(),
            y.len(),
            model.state_dim()
        )));
    }
    if y.dim() != model.obs_dim() {
        return Err(Error::Dimension("observation dimension mismatch".into()));
    }
    Ok(())
}

fn residuals_with(
    ag: &dyn AdditiveGaussian,
    w: &Whitening,
    theta: &[f64],
    y: &ObservationSequence,
    x: &[DVector<f64>],
    with_jacobian: bool,
) -> (DVector<f64>, Option<(Vec<DVector<f64>>, BlockTridiagonalMatrix)>) {
    let n = x.len();
    let dx = ag.state_dim();
    let dy = ag.obs_dim();
    let mut r = DVector::zeros(dx * n + dx * (n - 1) + dy * n);
    let mut jac = with_jacobian.then(|| (vec![DVector::zeros(dx); n], BlockTridiagonalMatrix::zeros(n, dx)));

    let e0 = &x[0] - ag.initial_mean();
    r.rows_mut(0, dx).copy_from(&Whitening::white(&w.p1, &e0));
    if let Some((g, h)) = jac.as_mut() {
        g[0] += &w.p1_inv * &e0;
        h.diag[0] += &w.p1_inv;
    }
    let mut off = dx;
    for t in 0..n - 1 {
        let e = &x[t + 1] - ag.transition_mean(theta, &x[t]);
        r.rows_mut(off, dx).copy_from(&Whitening::white(&w.q, &e));
        off += dx;
        if let Some((g, h)) = jac.as_mut() {
            let a = ag.transition_jacobian(theta, &x[t]);
            let qe = &w.q_inv * &e;
            g[t + 1] += &qe;
            g[t] -= a.transpose() * &qe;
            let atq = a.transpose() * &w.q_inv;
            h.diag[t] += &atq * &a;
            h.diag[t + 1] += &w.q_inv;
            h.upper[t] -= atq;
        }
    }
    for t in 0..n {
        let e = y.vector(t) - ag.measurement_mean(theta, &x[t]);
        r.rows_mut(off, dy).copy_from(&Whitening::white(&w.r, &e));
        off += dy;
        if let Some((g, h)) = jac.as_mut() {
            let c = ag.measurement_jacobian(theta, &x[t]);
            let ctr = c.transpose() * &w.r_inv;
            g[t] -= &ctr * &e;
            h.diag[t] += &ctr * &c;
        }
    }
    (r, jac)
}

/// Stacked whitened residuals with Jᵀr and JᵀJ at trajectory `x`.
pub fn stack_residuals(
    model: &dyn StateSpaceModel,
    theta: &[f64],
    y: &ObservationSequence,
    x: &[DVector<f64>],
) -> Result<ResidualSystem> {
    let ag = structure(model)?;
    check_dims(model, y, x)?;
    let w = Whitening::new(ag, theta)?;
    let (residuals, jac) = residuals_with(ag, &w, theta, y, x, true);
    let (gradient, hessian) = jac.expect("jacobian requested");
    Ok(ResidualSystem {
        residuals,
        gradient,
        hessian,
    })
}

/// Inputs of one MAP smoothing solve.
pub struct TrajectoryProblem<'a> {
    pub model: &'a dyn StateSpaceModel,
    pub theta: &'a [f64],
    pub y: &'a ObservationSequence,
    pub x0: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussNewtonOptions {
    pub max_iters: usize,
    /// Exit when ‖Jᵀr‖_∞ falls below this.
    pub grad_tol: f64,
    pub armijo_c: f64,
    /// Smallest step fraction tried before giving up.
    pub min_step: f64,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            grad_tol: 1e-6,
            armijo_c: 1e-4,
            min_step: (0.5f64).powi(30),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapSolution {
    pub states: Vec<DVector<f64>>,
    /// Gauss-Newton steps taken.
    pub iterations: usize,
    pub grad_norm: f64,
    /// Objective ½‖r‖² before the first step and after every accepted step.
    pub objective_trace: Vec<f64>,
    /// JᵀJ at `states`.
    pub hessian: BlockTridiagonalMatrix,
    pub converged: bool,
}

/// Gauss-Newton with Armijo backtracking on ½‖r‖².
pub fn gauss_newton_map(prob: TrajectoryProblem<'_>, opts: GaussNewtonOptions) -> Result<MapSolution> {
    let ag = structure(prob.model)?;
    check_dims(prob.model, prob.y, &prob.x0)?;
    let w = Whitening::new(ag, prob.theta)?;
    let eval = |x: &[DVector<f64>]| residuals_with(ag, &w, prob.theta, prob.y, x, true);
    let objective = |x: &[DVector<f64>]| 0.5 * residuals_with(ag, &w, prob.theta, prob.y, x, false).0.norm_squared();

    let mut x = prob.x0;
    let (mut r, mut jac) = eval(&x);
    let mut trace = vec![0.5 * r.norm_squared()];
    let mut iterations = 0;
    loop {
        let (g, h) = jac.take().expect("jacobian");
        let grad_norm = g.iter().map(|v| v.amax()).fold(0.0, f64::max);
        let converged = grad_norm <= opts.grad_tol;
        if converged || iterations >= opts.max_iters {
            return Ok(MapSolution {
                states: x,
                iterations,
                grad_norm,
                objective_trace: trace,
                hessian: h,
                converged,
            });
        }
        let neg: Vec<DVector<f64>> = g.iter().map(|v| -v).collect();
        let step = h.factor()?.solve(&neg);
        let slope: f64 = g.iter().zip(&step).map(|(a, b)| a.dot(b)).sum();
        let phi = 0.5 * r.norm_squared();
        let mut alpha = 1.0;
        let accepted = loop {
            let cand: Vec<DVector<f64>> = x.iter().zip(&step).map(|(xi, s)| xi + s * alpha).collect();
            let phi_new = objective(&cand);
            if phi_new.is_finite() && phi_new <= phi + opts.armijo_c * alpha * slope {
                break Some(cand);
            }
            alpha *= 0.5;
            if alpha < opts.min_step {
                break None;
            }
        };
        let Some(cand) = accepted else {
            // predicted decrease below working precision: already stationary
            if -0.5 * slope <= 1e-12 * phi.max(1.0) {
                return Ok(MapSolution {
                    states: x,
                    iterations,
                    grad_norm,
                    objective_trace: trace,
                    hessian: h,
                    converged: true,
                });
            }
            return Err(Error::NoProgress {
                iterations,
                grad_norm,
                last: x.iter().flat_map(|v| v.iter().copied()).collect(),
            });
        };
        x = cand;
        iterations += 1;
        let (r_new, jac_new) = eval(&x);
        r = r_new;
        jac = jac_new;
        trace.push(0.5 * r.norm_squared());
    }
}

/// Linearization smoother: EKF initialization, Gauss-Newton MAP trajectory,
/// and covariances from the inverse Gauss-Newton matrix.
pub fn map_smoother(
    model: &dyn StateSpaceModel,
    theta: &[f64],
    y: &ObservationSequence,
    opts: GaussNewtonOptions,
) -> Result<(f64, MapSolution, SmoothedMoments)> {
    let fr = ekf(model, theta, y)?;
    let sol = gauss_newton_map(
        TrajectoryProblem {
            model,
            theta,
            y,
            x0: fr.filtered_means(),
        },
        opts,
    )?;
    let (covs, cross_covs) = extract_smoothed_covariances(&sol.hessian)?;
    let moments = SmoothedMoments {
        means: sol.states.clone(),
        covs,
        cross_covs,
    };
    Ok((fr.loglik, sol, moments))
}
