use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AdditiveGaussian, AffinePart, LinearPart, StateSpaceModel};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, from_rows, gaussian_logpdf, log_det, to_rows, LN_2PI};
use crate::rng::SimRng;

/// Derivatives of the system matrices with respect to one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamJacobian {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl ParamJacobian {
    pub fn zeros(dx: usize, dy: usize) -> Self {
        Self {
            f: DMatrix::zeros(dx, dx),
            g: DMatrix::zeros(dy, dx),
            q: DMatrix::zeros(dx, dx),
            r: DMatrix::zeros(dy, dy),
        }
    }
}

/// Linear-Gaussian model whose matrices are affine in θ:
/// `F(θ) = f + Σ_j θ_j jacobians[j].f`, and likewise for G, Q and R.
///
/// x_{t+1} = F x_t + v, v ~ N(0, Q);  y_t = G x_t + e, e ~ N(0, R);
/// x_1 ~ N(mu, p1).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianSpec {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub p1: DMatrix<f64>,
    pub jacobians: Vec<ParamJacobian>,
}

/// Concrete matrices of a linear-Gaussian model at one θ.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub p1: DMatrix<f64>,
}

impl LinearSystem {
    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let dx = self.f.nrows();
        let dy = self.g.nrows();
        let shapes = [
            ("F", self.f.shape(), (dx, dx)),
            ("G", self.g.shape(), (dy, dx)),
            ("Q", self.q.shape(), (dx, dx)),
            ("R", self.r.shape(), (dy, dy)),
            ("P1", self.p1.shape(), (dx, dx)),
            ("mu", (self.mu.len(), 1), (dx, 1)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::InvalidSpec(format!("{name} has shape {got:?}, expected {want:?}")));
            }
        }
        for (name, m) in [("Q", &self.q), ("R", &self.r), ("P1", &self.p1)] {
            if (m - m.transpose()).abs().max() > 1e-10 * (1.0 + m.abs().max()) {
                return Err(Error::InvalidSpec(format!("{name} is not symmetric")));
            }
            if cholesky(m).is_none() {
                return Err(Error::InvalidSpec(format!("{name} is not positive definite")));
            }
        }
        Ok(())
    }
}

impl LinearGaussianSpec {
    /// Fixed system with no free parameters.
    pub fn fixed(system: LinearSystem) -> Self {
        Self {
            f: system.f,
            g: system.g,
            q: system.q,
            r: system.r,
            mu: system.mu,
            p1: system.p1,
            jacobians: Vec::new(),
        }
    }

    /// Scalar AR(1) observed in noise: F = θ₁, G = 1, Q = 1, R = θ₂, x₁ ~ N(0, 1).
    pub fn default_scalar() -> Self {
        let one = DMatrix::from_element(1, 1, 1.0);
        let zero = DMatrix::from_element(1, 1, 0.0);
        let mut j1 = ParamJacobian::zeros(1, 1);
        j1.f = one.clone();
        let mut j2 = ParamJacobian::zeros(1, 1);
        j2.r = one.clone();
        Self {
            f: zero.clone(),
            g: one.clone(),
            q: one.clone(),
            r: zero,
            mu: DVector::zeros(1),
            p1: one,
            jacobians: vec![j1, j2],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.jacobians.len()
    }

    /// Checks shapes of the base matrices and every Jacobian.
    pub fn validate_shapes(&self) -> Result<()> {
        let dx = self.state_dim();
        let dy = self.obs_dim();
        for (j, jac) in self.jacobians.iter().enumerate() {
            let shapes = [
                ("dF", jac.f.shape(), (dx, dx)),
                ("dG", jac.g.shape(), (dy, dx)),
                ("dQ", jac.q.shape(), (dx, dx)),
                ("dR", jac.r.shape(), (dy, dy)),
            ];
            for (name, got, want) in shapes {
                if got != want {
                    return Err(Error::InvalidSpec(format!(
                        "{name} for parameter {j} has shape {got:?}, expected {want:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn combine(&self, theta: &[f64]) -> LinearSystem {
        let mut sys = LinearSystem {
            f: self.f.clone(),
            g: self.g.clone(),
            q: self.q.clone(),
            r: self.r.clone(),
            mu: self.mu.clone(),
            p1: self.p1.clone(),
        };
        for (th, jac) in theta.iter().zip(&self.jacobians) {
            sys.f += &jac.f * *th;
            sys.g += &jac.g * *th;
            sys.q += &jac.q * *th;
            sys.r += &jac.r * *th;
        }
        sys
    }

    /// The system matrices at θ, validated.
    pub fn evaluate(&self, theta: &[f64]) -> Result<LinearSystem> {
        if theta.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "linear model has {} parameters, got {}",
                self.n_params(),
                theta.len()
            )));
        }
        let sys = self.combine(theta);
        sys.validate()?;
        Ok(sys)
    }
}

/// Serializable form of [`LinearGaussianSpec`]; matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianConfig {
    pub f: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub p1: Vec<Vec<f64>>,
    #[serde(default)]
    pub params: Vec<ParamJacobianConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamJacobianConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<f64>>>,
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    from_rows(rows).ok_or_else(|| Error::InvalidSpec(format!("{name} has ragged rows")))
}

impl TryFrom<LinearGaussianConfig> for LinearGaussianSpec {
    type Error = Error;

    fn try_from(c: LinearGaussianConfig) -> Result<Self> {
        let f = matrix("f", &c.f)?;
        let g = matrix("g", &c.g)?;
        let dx = f.nrows();
        let dy = g.nrows();
        let mut jacobians = Vec::with_capacity(c.params.len());
        for p in &c.params {
            let get = |name: &str, m: &Option<Vec<Vec<f64>>>, shape: (usize, usize)| match m {
                Some(rows) => matrix(name, rows),
                None => Ok(DMatrix::zeros(shape.0, shape.1)),
            };
            jacobians.push(ParamJacobian {
                f: get("params.f", &p.f, (dx, dx))?,
                g: get("params.g", &p.g, (dy, dx))?,
                q: get("params.q", &p.q, (dx, dx))?,
                r: get("params.r", &p.r, (dy, dy))?,
            });
        }
        let spec = LinearGaussianSpec {
            f,
            g,
            q: matrix("q", &c.q)?,
            r: matrix("r", &c.r)?,
            mu: DVector::from_vec(c.mu),
            p1: matrix("p1", &c.p1)?,
            jacobians,
        };
        spec.validate_shapes()?;
        // With free parameters the base matrices may be zero; PD-ness is
        // checked when the model is evaluated at a concrete θ.
        if spec.n_params() == 0 {
            spec.evaluate(&[])?;
        }
        Ok(spec)
    }
}

impl From<&LinearGaussianSpec> for LinearGaussianConfig {
    fn from(s: &LinearGaussianSpec) -> Self {
        Self {
            f: to_rows(&s.f),
            g: to_rows(&s.g),
            q: to_rows(&s.q),
            r: to_rows(&s.r),
            mu: s.mu.iter().copied().collect(),
            p1: to_rows(&s.p1),
            params: s
                .jacobians
                .iter()
                .map(|j| ParamJacobianConfig {
                    f: Some(to_rows(&j.f)),
                    g: Some(to_rows(&j.g)),
                    q: Some(to_rows(&j.q)),
                    r: Some(to_rows(&j.r)),
                })
                .collect(),
        }
    }
}

/// A [`LinearGaussianSpec`] exposed through the generic model interface.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    spec: LinearGaussianSpec,
}

impl LinearGaussianModel {
    pub fn new(spec: LinearGaussianSpec) -> Result<Self> {
        spec.validate_shapes()?;
        if spec.mu.len() != spec.state_dim() {
            return Err(Error::InvalidSpec("mu has the wrong length".into()));
        }
        if spec.n_params() == 0 {
            spec.evaluate(&[])?;
        }
        if cholesky(&spec.p1).is_none() {
            return Err(Error::InvalidSpec("P1 is not positive definite".into()));
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &LinearGaussianSpec {
        &self.spec
    }

    /// Matrices at θ. Panics if θ yields a non-positive-definite covariance;
    /// use [`LinearGaussianSpec::evaluate`] to get an error instead.
    fn system(&self, theta: &[f64]) -> LinearSystem {
        self.spec.combine(theta)
    }

    fn sample_gaussian(cov: &DMatrix<f64>, rng: &mut SimRng) -> DVector<f64> {
        let chol = cholesky(cov).expect("covariance must be positive definite");
        let z = DVector::from_fn(cov.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
        chol.l() * z
    }

    /// −½ tr(Σ⁻¹ dΣ) + ½ eᵀ Σ⁻¹ dΣ Σ⁻¹ e + eᵀ Σ⁻¹ dM x for every parameter.
    #[allow(clippy::too_many_arguments)]
    fn gaussian_score(
        cov: &DMatrix<f64>,
        e: &DVector<f64>,
        x: &DVector<f64>,
        dm: impl Fn(&ParamJacobian) -> (&DMatrix<f64>, &DMatrix<f64>),
        jacobians: &[ParamJacobian],
        scale: f64,
        acc: &mut [f64],
    ) {
        let chol = cholesky(cov).expect("covariance must be positive definite");
        let inv = chol.inverse();
        let ie = &inv * e;
        for (j, jac) in jacobians.iter().enumerate() {
            let (d_mat, d_cov) = dm(jac);
            let tr = (&inv * d_cov).trace();
            let quad = ie.dot(&(d_cov * &ie));
            let lin = ie.dot(&(d_mat * x));
            acc[j] += scale * (-0.5 * tr + 0.5 * quad + lin);
        }
    }
}

impl StateSpaceModel for LinearGaussianModel {
    fn name(&self) -> &str {
        "lgss"
    }

    fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    fn obs_dim(&self) -> usize {
        self.spec.obs_dim()
    }

    fn n_params(&self) -> usize {
        self.spec.n_params()
    }

    fn sample_initial(&self, rng: &mut SimRng, out: &mut [f64]) {
        let x = &self.spec.mu + Self::sample_gaussian(&self.spec.p1, rng);
        out.copy_from_slice(x.as_slice());
    }

    fn sample_transition(&self, theta: &[f64], x: &[f64], rng: &mut SimRng, out: &mut [f64]) {
        let sys = self.system(theta);
        let xv = DVector::from_column_slice(x);
        let xn = &sys.f * xv + Self::sample_gaussian(&sys.q, rng);
        out.copy_from_slice(xn.as_slice());
    }

    fn sample_observation(&self, theta: &[f64], x: &[f64], rng: &mut SimRng, out: &mut [f64]) {
        let sys = self.system(theta);
        let xv = DVector::from_column_slice(x);
        let y = &sys.g * xv + Self::sample_gaussian(&sys.r, rng);
        out.copy_from_slice(y.as_slice());
    }

    fn initial_logdensity(&self, x: &[f64]) -> f64 {
        let r = DVector::from_column_slice(x) - &self.spec.mu;
        gaussian_logpdf(&r, &cholesky(&self.spec.p1).expect("P1 positive definite"))
    }

    fn transition_logdensity(&self, theta: &[f64], x_next: &[f64], x: &[f64]) -> f64 {
        let sys = self.system(theta);
        let r = DVector::from_column_slice(x_next) - &sys.f * DVector::from_column_slice(x);
        match cholesky(&sys.q) {
            Some(c) => gaussian_logpdf(&r, &c),
            None => f64::NEG_INFINITY,
        }
    }

    fn observation_logdensity(&self, theta: &[f64], y: &[f64], x: &[f64]) -> f64 {
        let sys = self.system(theta);
        let r = DVector::from_column_slice(y) - &sys.g * DVector::from_column_slice(x);
        match cholesky(&sys.r) {
            Some(c) => gaussian_logpdf(&r, &c),
            None => f64::NEG_INFINITY,
        }
    }

    fn add_transition_score(&self, theta: &[f64], x_next: &[f64], x: &[f64], scale: f64, acc: &mut [f64]) {
        let sys = self.system(theta);
        let xv = DVector::from_column_slice(x);
        let e = DVector::from_column_slice(x_next) - &sys.f * &xv;
        Self::gaussian_score(&sys.q, &e, &xv, |j| (&j.f, &j.q), &self.spec.jacobians, scale, acc);
    }

    fn add_observation_score(&self, theta: &[f64], y: &[f64], x: &[f64], scale: f64, acc: &mut [f64]) {
        let sys = self.system(theta);
        let xv = DVector::from_column_slice(x);
        let e = DVector::from_column_slice(y) - &sys.g * &xv;
        Self::gaussian_score(&sys.r, &e, &xv, |j| (&j.g, &j.r), &self.spec.jacobians, scale, acc);
    }

    fn transition_density_bound(&self, theta: &[f64]) -> Option<f64> {
        let q = self.system(theta).q;
        let chol = cholesky(&q)?;
        let d = q.nrows() as f64;
        Some((-0.5 * (d * LN_2PI + log_det(&chol))).exp())
    }

    fn additive_gaussian(&self) -> Option<&dyn AdditiveGaussian> {
        Some(self)
    }
}

impl AdditiveGaussian for LinearGaussianModel {
    fn initial_mean(&self) -> DVector<f64> {
        self.spec.mu.clone()
    }

    fn initial_cov(&self) -> DMatrix<f64> {
        self.spec.p1.clone()
    }

    fn transition_mean(&self, theta: &[f64], x: &DVector<f64>) -> DVector<f64> {
        self.system(theta).f * x
    }

    fn transition_jacobian(&self, theta: &[f64], _x: &DVector<f64>) -> DMatrix<f64> {
        self.system(theta).f
    }

    fn measurement_mean(&self, theta: &[f64], x: &DVector<f64>) -> DVector<f64> {
        self.system(theta).g * x
    }

    fn measurement_jacobian(&self, theta: &[f64], _x: &DVector<f64>) -> DMatrix<f64> {
        self.system(theta).g
    }

    fn process_cov(&self, theta: &[f64]) -> DMatrix<f64> {
        self.system(theta).q
    }

    fn measurement_cov(&self, theta: &[f64]) -> DMatrix<f64> {
        self.system(theta).r
    }

    fn process_cov_derivs(&self, _theta: &[f64]) -> Vec<DMatrix<f64>> {
        self.spec.jacobians.iter().map(|j| j.q.clone()).collect()
    }

    fn measurement_cov_derivs(&self, _theta: &[f64]) -> Vec<DMatrix<f64>> {
        self.spec.jacobians.iter().map(|j| j.r.clone()).collect()
    }

    fn linear_dynamics(&self, theta: &[f64]) -> Option<LinearPart> {
        Some(LinearPart {
            matrix: self.system(theta).f,
            derivs: self.spec.jacobians.iter().map(|j| j.f.clone()).collect(),
        })
    }

    fn affine_measurement(&self, theta: &[f64]) -> Option<AffinePart> {
        let dy = self.spec.obs_dim();
        Some(AffinePart {
            matrix: self.system(theta).g,
            offset: DVector::zeros(dy),
            matrix_derivs: self.spec.jacobians.iter().map(|j| j.g.clone()).collect(),
            offset_derivs: vec![DVector::zeros(dy); self.spec.n_params()],
        })
    }
}
