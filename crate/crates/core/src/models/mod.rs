//! State-space model abstraction and the concrete models used by the
//! estimators.
//!
//! A model is described behaviourally by [`StateSpaceModel`]: samplers, log
//! densities, and the analytic parameter gradient of the complete-data
//! log-density split into its transition and observation parts. Models with
//! additive Gaussian noise additionally implement [`AdditiveGaussian`], which
//! the linearization back-end (EKF, MAP smoother, moment gradients) requires.
//!
//! The per-particle methods work on plain slices so that the particle filter
//! can run without allocating.

mod benchmark;
mod linear;

pub use benchmark::{BenchmarkModel1, BenchmarkModel2};
pub use linear::{LinearGaussianConfig, LinearGaussianModel, LinearGaussianSpec, LinearSystem, ParamJacobian};

use std::ops::Deref;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, SimRng};

/// The static parameter vector being estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameters("parameter vector is empty".into()));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameters(format!("entry {j} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParameterVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ParameterVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ParameterVector> for Vec<f64> {
    fn from(p: ParameterVector) -> Vec<f64> {
        p.0
    }
}

/// A time series of equally sized real vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    dim: usize,
    data: Vec<f64>,
}

/// Observations y_1..y_N.
pub type ObservationSequence = Series;
/// Latent states x_1..x_N.
pub type StateTrajectory = Series;

impl Series {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Dimension(format!(
                "series of {} values cannot have dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn with_capacity(dim: usize, len: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * len),
        }
    }

    pub fn from_scalars(values: &[f64]) -> Self {
        Self {
            dim: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_vectors(vs: &[DVector<f64>]) -> Result<Self> {
        let dim = vs.first().map(|v| v.len()).unwrap_or(1);
        let mut s = Self::with_capacity(dim, vs.len());
        for v in vs {
            s.push(v.as_slice())?;
        }
        Ok(s)
    }

    pub fn push(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Dimension(format!(
                "expected vector of dimension {}, got {}",
                self.dim,
                v.len()
            )));
        }
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn get_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn vector(&self, t: usize) -> DVector<f64> {
        DVector::from_column_slice(self.get(t))
    }

    pub fn to_vectors(&self) -> Vec<DVector<f64>> {
        (0..self.len()).map(|t| self.vector(t)).collect()
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Values of component `i` over time.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.iter().map(|v| v[i]).collect()
    }
}

/// Behavioural description of a state-space model.
///
/// `theta` always has length [`n_params`](Self::n_params). Score methods add
/// `scale` times the parameter gradient into `acc` so that weighted particle
/// averages can be accumulated in place.
pub trait StateSpaceModel: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn n_params(&self) -> usize;

    fn sample_initial(&self, rng: &mut SimRng, out: &mut [f64]);
    fn sample_transition(&self, theta: &[f64], x: &[f64], rng: &mut SimRng, out: &mut [f64]);
    fn sample_observation(&self, theta: &[f64], x: &[f64], rng: &mut SimRng, out: &mut [f64]);

    fn initial_logdensity(&self, x: &[f64]) -> f64;
    /// log f_θ(x_next | x)
    fn transition_logdensity(&self, theta: &[f64], x_next: &[f64], x: &[f64]) -> f64;
    /// log g_θ(y | x)
    fn observation_logdensity(&self, theta: &[f64], y: &[f64], x: &[f64]) -> f64;

    /// acc += scale * ∂/∂θ log f_θ(x_next | x)
    fn add_transition_score(&self, theta: &[f64], x_next: &[f64], x: &[f64], scale: f64, acc: &mut [f64]);
    /// acc += scale * ∂/∂θ log g_θ(y | x)
    fn add_observation_score(&self, theta: &[f64], y: &[f64], x: &[f64], scale: f64, acc: &mut [f64]);

    /// Upper bound on f_θ(x' | x) over all (x, x'), used for rejection sampling.
    fn transition_density_bound(&self, theta: &[f64]) -> Option<f64>;

    fn additive_gaussian(&self) -> Option<&dyn AdditiveGaussian> {
        None
    }

    /// The integrand of Fisher's identity at one time step:
    /// ∂/∂θ [log f_θ(x_next | x) + log g_θ(y | x)].
    ///
    /// At the final time there is no successor state and only the observation
    /// term remains. The initial density does not depend on θ.
    fn xi(&self, theta: &[f64], x_next: Option<&[f64]>, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_params()];
        if let Some(xn) = x_next {
            self.add_transition_score(theta, xn, x, 1.0, &mut acc);
        }
        self.add_observation_score(theta, y, x, 1.0, &mut acc);
        acc
    }
}

/// F(θ) and its constant parameter derivatives for dynamics linear in the state.
#[derive(Debug, Clone)]
pub struct LinearPart {
    pub matrix: DMatrix<f64>,
    pub derivs: Vec<DMatrix<f64>>,
}

/// y = G(θ) x + c(θ) + e, with parameter derivatives of G and c.
#[derive(Debug, Clone)]
pub struct AffinePart {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub matrix_derivs: Vec<DMatrix<f64>>,
    pub offset_derivs: Vec<DVector<f64>>,
}

/// Additive-Gaussian structure
/// x' = f_θ(x) + v, v ~ N(0, Q(θ));  y = g_θ(x) + e, e ~ N(0, R(θ));
/// x_1 ~ N(μ, P_1) independent of θ.
pub trait AdditiveGaussian: StateSpaceModel {
    fn initial_mean(&self) -> DVector<f64>;
    fn initial_cov(&self) -> DMatrix<f64>;

    fn transition_mean(&self, theta: &[f64], x: &DVector<f64>) -> DVector<f64>;
    fn transition_jacobian(&self, theta: &[f64], x: &DVector<f64>) -> DMatrix<f64>;
    fn measurement_mean(&self, theta: &[f64], x: &DVector<f64>) -> DVector<f64>;
    fn measurement_jacobian(&self, theta: &[f64], x: &DVector<f64>) -> DMatrix<f64>;

    fn process_cov(&self, theta: &[f64]) -> DMatrix<f64>;
    fn measurement_cov(&self, theta: &[f64]) -> DMatrix<f64>;
    fn process_cov_derivs(&self, theta: &[f64]) -> Vec<DMatrix<f64>>;
    fn measurement_cov_derivs(&self, theta: &[f64]) -> Vec<DMatrix<f64>>;

    /// `Some` when f_θ(x) = F(θ) x; the smoothed-moment gradient is then exact.
    fn linear_dynamics(&self, theta: &[f64]) -> Option<LinearPart>;
    /// `Some` when g_θ(x) = G(θ) x + c(θ).
    fn affine_measurement(&self, theta: &[f64]) -> Option<AffinePart>;
}

/// Shared handle to a model.
pub type ModelSpec = Arc<dyn StateSpaceModel>;

pub fn make_model1() -> BenchmarkModel1 {
    BenchmarkModel1::default()
}

pub fn make_model2() -> BenchmarkModel2 {
    BenchmarkModel2::default()
}

pub fn make_linear_gaussian(spec: LinearGaussianSpec) -> Result<LinearGaussianModel> {
    LinearGaussianModel::new(spec)
}

/// Names accepted by [`model_by_name`].
pub const MODEL_NAMES: [&str; 3] = ["model1", "model2", "lgss"];

/// Looks up a model by name. `lgss` uses `lgss` when supplied and the default
/// scalar system otherwise.
pub fn model_by_name(name: &str, lgss: Option<LinearGaussianSpec>) -> Result<ModelSpec> {
    match name {
        "model1" => Ok(Arc::new(make_model1())),
        "model2" => Ok(Arc::new(make_model2())),
        "lgss" => Ok(Arc::new(make_linear_gaussian(
            lgss.unwrap_or_else(LinearGaussianSpec::default_scalar),
        )?)),
        other => Err(Error::Config(format!(
            "unknown model '{other}', expected one of {}",
            MODEL_NAMES.join(", ")
        ))),
    }
}

/// Draws (x_{1:N}, y_{1:N}) from p(x_1) ∏ f_θ ∏ g_θ.
pub fn simulate(
    model: &dyn StateSpaceModel,
    theta: &[f64],
    n: usize,
    seed: u64,
) -> Result<(StateTrajectory, ObservationSequence)> {
    if n == 0 {
        return Err(Error::Config("simulation length must be at least 1".into()));
    }
    if theta.len() != model.n_params() {
        return Err(Error::Dimension(format!(
            "model {} has {} parameters, got {}",
            model.name(),
            model.n_params(),
            theta.len()
        )));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameters("non-finite parameter".into()));
    }
    let dx = model.state_dim();
    let dy = model.obs_dim();
    let mut rng = rng_from_seed(seed);
    let mut xs = vec![0.0; dx * n];
    let mut ys = vec![0.0; dy * n];
    model.sample_initial(&mut rng, &mut xs[..dx]);
    for t in 0..n {
        if t > 0 {
            let (prev, cur) = xs.split_at_mut(t * dx);
            model.sample_transition(theta, &prev[(t - 1) * dx..], &mut rng, &mut cur[..dx]);
        }
        let x = &xs[t * dx..(t + 1) * dx];
        model.sample_observation(theta, x, &mut rng, &mut ys[t * dy..(t + 1) * dy]);
        let y = &ys[t * dy..(t + 1) * dy];
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::SimulationDiverged { t });
        }
    }
    Ok((Series::new(dx, xs)?, Series::new(dy, ys)?))
}

#[cfg(test)]
mod tests;
