//! Kalman filter, first-order extended Kalman filter and the
//! Rauch-Tung-Striebel smoother with lag-one cross-covariances.
//!
//! Both filters share one recursion; they differ only in how the dynamics and
//! measurement are linearized. Covariance updates use the Joseph form and are
//! re-symmetrized after every step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_with_jitter, ensure_psd, gaussian_logpdf, symmetrize};
use crate::models::{AdditiveGaussian, LinearSystem, ObservationSequence, StateSpaceModel};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    /// Σ_t log N(y_t; ŷ_{t|t-1}, S_t)
    pub loglik: f64,
    pub filtered: Vec<GaussianBelief>,
    /// p(x_t | y_{1:t-1}); the first entry is the prior on x_1.
    pub predicted: Vec<GaussianBelief>,
    /// (ŷ_{t|t-1}, S_t)
    pub predictive_obs: Vec<(DVector<f64>, DMatrix<f64>)>,
    /// Dynamics Jacobian used to predict from t to t+1 (length N-1).
    pub transition_jacobians: Vec<DMatrix<f64>>,
}

impl FilterResult {
    pub fn len(&self) -> usize {
        self.filtered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filtered.is_empty()
    }

    pub fn filtered_means(&self) -> Vec<DVector<f64>> {
        self.filtered.iter().map(|b| b.mean.clone()).collect()
    }

    /// Re-evaluates the log-likelihood from the stored predictive moments.
    pub fn recompute_loglik(&self, y: &ObservationSequence) -> Option<f64> {
        let mut total = 0.0;
        for (t, (yhat, s)) in self.predictive_obs.iter().enumerate() {
            let chol = cholesky_with_jitter(s)?;
            total += gaussian_logpdf(&(y.vector(t) - yhat), &chol);
        }
        Some(total)
    }
}

/// Smoothed moments x̂_{t|N}, P_{t|N} and Cov(x_t, x_{t+1} | y_{1:N}).
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedMoments {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// `cross_covs[t]` = Cov(x_t, x_{t+1}); length N-1.
    pub cross_covs: Vec<DMatrix<f64>>,
}

impl SmoothedMoments {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// How a filter linearizes the model at a point.
trait Linearization {
    fn predict(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
    fn measure(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
    fn q(&self) -> &DMatrix<f64>;
    fn r(&self) -> &DMatrix<f64>;
}

struct Exact<'a>(&'a LinearSystem);

impl Linearization for Exact<'_> {
    fn predict(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (&self.0.f * x, self.0.f.clone())
    }

    fn measure(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (&self.0.g * x, self.0.g.clone())
    }

    fn q(&self) -> &DMatrix<f64> {
        &self.0.q
    }

    fn r(&self) -> &DMatrix<f64> {
        &self.0.r
    }
}

struct FirstOrder<'a> {
    model: &'a dyn AdditiveGaussian,
    theta: &'a [f64],
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl Linearization for FirstOrder<'_> {
    fn predict(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (
            self.model.transition_mean(self.theta, x),
            self.model.transition_jacobian(self.theta, x),
        )
    }

    fn measure(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (
            self.model.measurement_mean(self.theta, x),
            self.model.measurement_jacobian(self.theta, x),
        )
    }

    fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Flavor {
    Kalman,
    Extended,
}

fn diverged(flavor: Flavor, t: usize, reason: &str, kalman: Error) -> Error {
    match flavor {
        Flavor::Kalman => kalman,
        Flavor::Extended => Error::DivergedFilter {
            t,
            reason: reason.to_string(),
        },
    }
}

fn run_filter(
    lin: &dyn Linearization,
    mu: &DVector<f64>,
    p1: &DMatrix<f64>,
    y: &ObservationSequence,
    flavor: Flavor,
) -> Result<FilterResult> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Dimension("observation sequence is empty".into()));
    }
    let dx = mu.len();
    let eye = DMatrix::<f64>::identity(dx, dx);
    let mut out = FilterResult {
        loglik: 0.0,
        filtered: Vec::with_capacity(n),
        predicted: Vec::with_capacity(n),
        predictive_obs: Vec::with_capacity(n),
        transition_jacobians: Vec::with_capacity(n.saturating_sub(1)),
    };
    let mut x_pred = mu.clone();
    let mut p_pred = p1.clone();
    for t in 0..n {
        let yt = y.vector(t);
        let (yhat, h) = lin.measure(&x_pred);
        if h.iter().chain(yhat.iter()).any(|v| !v.is_finite()) {
            return Err(Error::DivergedFilter {
                t,
                reason: "non-finite measurement linearization".into(),
            });
        }
        let mut s = &h * &p_pred * h.transpose() + lin.r();
        symmetrize(&mut s);
        let chol = cholesky_with_jitter(&s).ok_or_else(|| {
            diverged(flavor, t, "singular innovation covariance", Error::SingularInnovation { t })
        })?;
        let innov = &yt - &yhat;
        out.loglik += gaussian_logpdf(&innov, &chol);

        // K = P Hᵀ S⁻¹
        let pht = &p_pred * h.transpose();
        let k = chol.solve(&pht.transpose()).transpose();
        let x_filt = &x_pred + &k * innov;
        let ikh = &eye - &k * &h;
        let mut p_filt = &ikh * &p_pred * ikh.transpose() + &k * lin.r() * k.transpose();
        if !ensure_psd(&mut p_filt) {
            return Err(diverged(
                flavor,
                t,
                "filtered covariance lost positive semidefiniteness",
                Error::SingularCovariance { t },
            ));
        }

        out.predicted.push(GaussianBelief {
            mean: x_pred.clone(),
            cov: p_pred.clone(),
        });
        out.predictive_obs.push((yhat, s));

        if t + 1 < n {
            let (fx, f) = lin.predict(&x_filt);
            if f.iter().chain(fx.iter()).any(|v| !v.is_finite()) {
                return Err(Error::DivergedFilter {
                    t,
                    reason: "non-finite dynamics linearization".into(),
                });
            }
            p_pred = &f * &p_filt * f.transpose() + lin.q();
            symmetrize(&mut p_pred);
            x_pred = fx;
            out.transition_jacobians.push(f);
        }
        out.filtered.push(GaussianBelief {
            mean: x_filt,
            cov: p_filt,
        });
    }
    if !out.loglik.is_finite() {
        return Err(diverged(
            flavor,
            n - 1,
            "non-finite log-likelihood",
            Error::SingularInnovation { t: n - 1 },
        ));
    }
    Ok(out)
}

fn check_obs_dim(expected: usize, y: &ObservationSequence) -> Result<()> {
    if y.dim() != expected {
        return Err(Error::Dimension(format!(
            "observations have dimension {}, model expects {expected}",
            y.dim()
        )));
    }
    Ok(())
}

/// Exact Kalman filter for a linear-Gaussian system.
pub fn kalman_filter(sys: &LinearSystem, y: &ObservationSequence) -> Result<FilterResult> {
    sys.validate()?;
    check_obs_dim(sys.obs_dim(), y)?;
    run_filter(&Exact(sys), &sys.mu, &sys.p1, y, Flavor::Kalman)
}

/// First-order extended Kalman filter. The measurement is relinearized at the
/// predicted mean.
pub fn ekf(model: &dyn StateSpaceModel, theta: &[f64], y: &ObservationSequence) -> Result<FilterResult> {
    let ag = model.additive_gaussian().ok_or(Error::MissingStructure("the extended Kalman filter"))?;
    check_obs_dim(model.obs_dim(), y)?;
    if theta.len() != model.n_params() {
        return Err(Error::Dimension(format!(
            "expected {} parameters, got {}",
            model.n_params(),
            theta.len()
        )));
    }
    let lin = FirstOrder {
        model: ag,
        theta,
        q: ag.process_cov(theta),
        r: ag.measurement_cov(theta),
    };
    if cholesky(&lin.q).is_none() || cholesky(&lin.r).is_none() {
        return Err(Error::InvalidSpec("noise covariance is not positive definite".into()));
    }
    run_filter(&lin, &ag.initial_mean(), &ag.initial_cov(), y, Flavor::Extended)
}

/// Rauch-Tung-Striebel backward pass over a filter run.
///
/// Cross-covariances use the smoother-gain product
/// Cov(x_t, x_{t+1} | y_{1:N}) = J_t P_{t+1|N}, J_t = P_{t|t} F_tᵀ P_{t+1|t}⁻¹.
pub fn rts_smoother(fr: &FilterResult) -> Result<SmoothedMoments> {
    let n = fr.len();
    let mut means = vec![DVector::zeros(0); n];
    let mut covs = vec![DMatrix::zeros(0, 0); n];
    let mut cross_covs = vec![DMatrix::zeros(0, 0); n.saturating_sub(1)];
    if n == 0 {
        return Ok(SmoothedMoments {
            means: Vec::new(),
            covs: Vec::new(),
            cross_covs: Vec::new(),
        });
    }
    means[n - 1] = fr.filtered[n - 1].mean.clone();
    covs[n - 1] = fr.filtered[n - 1].cov.clone();
    for t in (0..n - 1).rev() {
        let filt = &fr.filtered[t];
        let pred = &fr.predicted[t + 1];
        let f = &fr.transition_jacobians[t];
        let chol = cholesky(&pred.cov).ok_or(Error::SingularCovariance { t: t + 1 })?;
        // J = P_f Fᵀ P_p⁻¹  ⇔  Jᵀ = P_p⁻¹ F P_f
        let gain = chol.solve(&(f * &filt.cov)).transpose();
        let mean = &filt.mean + &gain * (&means[t + 1] - &pred.mean);
        let mut cov = &filt.cov + &gain * (&covs[t + 1] - &pred.cov) * gain.transpose();
        symmetrize(&mut cov);
        cross_covs[t] = &gain * &covs[t + 1];
        means[t] = mean;
        covs[t] = cov;
    }
    Ok(SmoothedMoments {
        means,
        covs,
        cross_covs,
    })
}
