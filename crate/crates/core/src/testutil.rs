//! Brute-force oracles used only by unit tests.
//!
//! The joint distribution of (x_{1:N}, y_{1:N}) for a linear-Gaussian system
//! is assembled densely, independently of any recursion in the crate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::models::{LinearSystem, ObservationSequence};
use crate::rng::SimRng;

pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("oracle covariance PD");
    let r = x - mean;
    let z = chol.l().solve_lower_triangular(&r).unwrap();
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (r.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + z.norm_squared())
}

/// Mean and covariance of the stacked vector [x_1; ..; x_N; y_1; ..; y_N].
pub fn joint_gaussian(sys: &LinearSystem, n: usize) -> (DVector<f64>, DMatrix<f64>) {
    let dx = sys.f.nrows();
    let dy = sys.g.nrows();
    // x = A w where w = [x_1 - mu, v_1, .., v_{N-1}] and x_t = F^{t-1} x_1 + Σ F^{t-1-s} v_s
    let nw = n * dx;
    let mut a = DMatrix::zeros(n * dx, nw);
    let mut w_cov = DMatrix::zeros(nw, nw);
    w_cov.view_mut((0, 0), (dx, dx)).copy_from(&sys.p1);
    for s in 1..n {
        w_cov.view_mut((s * dx, s * dx), (dx, dx)).copy_from(&sys.q);
    }
    for t in 0..n {
        for s in 0..=t {
            let mut pow = DMatrix::identity(dx, dx);
            for _ in 0..(t - s) {
                pow = &sys.f * pow;
            }
            a.view_mut((t * dx, s * dx), (dx, dx)).copy_from(&pow);
        }
    }
    let mut mean_x = DVector::zeros(n * dx);
    let mut m = sys.mu.clone();
    for t in 0..n {
        mean_x.rows_mut(t * dx, dx).copy_from(&m);
        m = &sys.f * m;
    }
    let cov_x = &a * &w_cov * a.transpose();
    let mut gbig = DMatrix::zeros(n * dy, n * dx);
    let mut rbig = DMatrix::zeros(n * dy, n * dy);
    for t in 0..n {
        gbig.view_mut((t * dy, t * dx), (dy, dx)).copy_from(&sys.g);
        rbig.view_mut((t * dy, t * dy), (dy, dy)).copy_from(&sys.r);
    }
    let mean_y = &gbig * &mean_x;
    let cov_xy = &cov_x * gbig.transpose();
    let cov_y = &gbig * &cov_x * gbig.transpose() + rbig;
    let d = n * (dx + dy);
    let mut mean = DVector::zeros(d);
    mean.rows_mut(0, n * dx).copy_from(&mean_x);
    mean.rows_mut(n * dx, n * dy).copy_from(&mean_y);
    let mut cov = DMatrix::zeros(d, d);
    cov.view_mut((0, 0), (n * dx, n * dx)).copy_from(&cov_x);
    cov.view_mut((0, n * dx), (n * dx, n * dy)).copy_from(&cov_xy);
    cov.view_mut((n * dx, 0), (n * dy, n * dx)).copy_from(&cov_xy.transpose());
    cov.view_mut((n * dx, n * dx), (n * dy, n * dy)).copy_from(&cov_y);
    (mean, cov)
}

fn stack(y: &ObservationSequence) -> DVector<f64> {
    DVector::from_column_slice(y.as_slice())
}

/// log p(y_{1:N}) from the dense joint Gaussian.
pub fn joint_loglik(sys: &LinearSystem, y: &ObservationSequence) -> f64 {
    let n = y.len();
    let nx = n * sys.f.nrows();
    let ny = n * sys.g.nrows();
    let (mean, cov) = joint_gaussian(sys, n);
    mvn_logpdf(
        &stack(y),
        &mean.rows(nx, ny).into_owned(),
        &cov.view((nx, nx), (ny, ny)).into_owned(),
    )
}

/// Mean and covariance of p(x_{1:N} | y_{1:N}) by dense conditioning.
pub fn joint_posterior(sys: &LinearSystem, y: &ObservationSequence) -> (DVector<f64>, DMatrix<f64>) {
    let n = y.len();
    let nx = n * sys.f.nrows();
    let ny = n * sys.g.nrows();
    let (mean, cov) = joint_gaussian(sys, n);
    let sxx = cov.view((0, 0), (nx, nx)).into_owned();
    let sxy = cov.view((0, nx), (nx, ny)).into_owned();
    let syy = cov.view((nx, nx), (ny, ny)).into_owned();
    let inv = syy.try_inverse().unwrap();
    let gain = &sxy * inv;
    let pm = mean.rows(0, nx) + &gain * (stack(y) - mean.rows(nx, ny));
    let pc = sxx - &gain * sxy.transpose();
    (pm, pc)
}

/// Random stable system with well-conditioned covariances.
pub fn random_stable_system(rng: &mut SimRng, dx: usize, dy: usize) -> LinearSystem {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let mut f = DMatrix::from_fn(dx, dx, |_, _| u(-0.5, 0.5));
    // scale into the unit disk
    let norm = f.norm();
    if norm > 0.9 {
        f *= 0.9 / norm;
    }
    let g = DMatrix::from_fn(dy, dx, |_, _| u(-1.5, 1.5));
    let spd = |m: DMatrix<f64>, k: usize, eps: f64| &m * m.transpose() + DMatrix::identity(k, k) * eps;
    let q = spd(DMatrix::from_fn(dx, dx, |_, _| u(-1.0, 1.0)), dx, 0.2);
    let r = spd(DMatrix::from_fn(dy, dy, |_, _| u(-0.6, 0.6)), dy, 0.1);
    let p1 = spd(DMatrix::from_fn(dx, dx, |_, _| u(-1.0, 1.0)), dx, 0.5);
    let mu = DVector::from_fn(dx, |_, _| u(-1.0, 1.0));
    LinearSystem { f, g, q, r, mu, p1 }
}
