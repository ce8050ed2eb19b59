//! The two scalar benchmark models.
//!
//! Model 1: x' = atan(x) + v,       y = θ₁ x + θ₂ + e
//! Model 2: x' = θ₁ atan(x) + v,    y = θ₂ x + e
//!
//! with v ~ N(0, 1), e ~ N(0, 0.1²) and x₁ ~ N(0, 1). The noise variances are
//! fixed constants, not parameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{AdditiveGaussian, AffinePart, LinearPart, StateSpaceModel};
use crate::linalg::LN_2PI;
use crate::rng::SimRng;

pub const PROCESS_VARIANCE: f64 = 1.0;
pub const MEASUREMENT_VARIANCE: f64 = 0.01;

fn normal_logpdf(r: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

macro_rules! scalar_noise_impl {
    () => {
        fn state_dim(&self) -> usize {
            1
        }

        fn obs_dim(&self) -> usize {
            1
        }

        fn n_params(&self) -> usize {
            2
        }

        fn sample_initial(&self, rng: &mut SimRng, out: &mut [f64]) {
            out[0] = rng.sample::<f64, _>(StandardNormal);
        }

        fn initial_logdensity(&self, x: &[f64]) -> f64 {
            normal_logpdf(x[0], 1.0)
        }

        fn transition_density_bound(&self, _theta: &[f64]) -> Option<f64> {
            Some(1.0 / (2.0 * std::f64::consts::PI * self.process_var).sqrt())
        }

        fn additive_gaussian(&self) -> Option<&dyn AdditiveGaussian> {
            Some(self)
        }
    };
}

/// Nonlinear dynamics, parameters only in the (linear) measurement equation.
#[derive(Debug, Clone, Copy)]
pub struct BenchmarkModel1 {
    pub process_var: f64,
    pub measurement_var: f64,
}

impl Default for BenchmarkModel1 {
    fn default() -> Self {
        Self {
            process_var: PROCESS_VARIANCE,
            measurement_var: MEASUREMENT_VARIANCE,
        }
    }
}

impl BenchmarkModel1 {
    pub fn with_noise(process_var: f64, measurement_var: f64) -> Self {
        Self {
            process_var,
            measurement_var,
        }
    }
}

impl StateSpaceModel for BenchmarkModel1 {
    fn name(&self) -> &str {
        "model1"
    }

    scalar_noise_impl!();

    fn sample_transition(&self, _theta: &[f64], x: &[f64], rng: &mut SimRng, out: &mut [f64]) {
        let v: f64 = rng.sample(StandardNormal);
        out[0] = x[0].atan() + self.process_var.sqrt() * v;
    }

    fn sample_observation(&self, theta: &[f64], x: &[f64], rng: &mut SimRng, out: &mut [f64]) {
        let e: f64 = rng.sample(StandardNormal);
        out[0] = theta[0] * x[0] + theta[1] + self.measurement_var.sqrt() * e;
    }

    fn transition_logdensity(&self, _theta: &[f64], x_next: &[f64], x: &[f64]) -> f64 {
        normal_logpdf(x_next[0] - x[0].atan(), self.process_var)
    }

    fn observation_logdensity(&self, theta: &[f64], y: &[f64], x: &[f64]) -> f64 {
        normal_logpdf(y[0] - theta[0] * x[0] - theta[1], self.measurement_var)
    }

    fn add_transition_score(&self, _: &[f64], _: &[f64], _: &[f64], _: f64, _: &mut [f64]) {}

    fn add_observation_score(&self, theta: &[f64], y: &[f64], x: &[f64], scale: f64, acc: &mut [f64]) {
        let e = scale * (y[0] - theta[0] * x[0] - theta[1]) / self.measurement_var;
        acc[0] += x[0] * e;
        acc[1] += e;
    }
}

impl AdditiveGaussian for BenchmarkModel1 {
    fn initial_mean(&self) -> DVector<f64> {
        DVector::zeros(1)
    }

    fn initial_cov(&self) -> DMatrix<f64> {
        scalar(1.0)
    }

    fn transition_mean(&self, _theta: &[f64], x: &DVector<f64>) -> DVector<f64> {
        x.map(f64::atan)
    }

    fn transition_jacobian(&self, _theta: &[f64], x: &DVector<f64>) -> DMatrix<f64> {
        scalar(1.0 / (1.0 + x[0] * x[0]))
    }

    fn measurement_mean(&self, theta: &[f64], x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, theta[0] * x[0] + theta[1])
    }

    fn measurement_jacobian(&self, theta: &[f64], _x: &DVector<f64>) -> DMatrix<f64> {
        scalar(theta[0])
    }

    fn process_cov(&self, _theta: &[f64]) -> DMatrix<f64> {
        scalar(self.process_var)
    }

    fn measurement_cov(&self, _theta: &[f64]) -> DMatrix<f64> {
        scalar(self.measurement_var)
    }

    fn process_cov_derivs(&self, _theta: &[f64]) -> Vec<DMatrix<f64>> {
        vec![scalar(0.0); 2]
    }

    fn measurement_cov_derivs(&self, _theta: &[f64]) -> Vec<DMatrix<f64>> {
        vec![scalar(0.0); 2]
    }

    fn linear_dynamics(&self, _theta: &[f64]) -> Option<LinearPart> {
        None
    }

    fn affine_measurement(&self, theta: &[f64]) -> Option<AffinePart> {
        Some(AffinePart {
            matrix: scalar(theta[0]),
            offset: DVector::from_element(1, theta[1]),
            matrix_derivs: vec![scalar(1.0), scalar(0.0)],
            offset_derivs: vec![DVector::from_element(1, 0.0), DVector::from_element(1, 1.0)],
        })
    }
}

/// θ₁ scales the nonlinear dynamics; θ₂ is the measurement gain.
#[derive(Debug, Clone, Copy)]
pub struct BenchmarkModel2 {
    pub process_var: f64,
    pub measurement_var: f64,
}

impl Default for BenchmarkModel2 {
    fn default() -> Self {
        Self {
            process_var: PROCESS_VARIANCE,
            measurement_var: MEASUREMENT_VARIANCE,
        }
    }
}

impl BenchmarkModel2 {
    pub fn with_noise(process_var: f64, measurement_var: f64) -> Self {
        Self {
            process_var,
            measurement_var,
        }
    }
}

impl StateSpaceModel for BenchmarkModel2 {
    fn name(&self) -> &str {
        "model2"
    }

    scalar_noise_impl!();

    fn sample_transition(&self, theta: &[f64], x: &[f64], rng: &mut SimRng, out: &mut [f64]) {
        let v: f64 = rng.sample(StandardNormal);
        out[0] = theta[0] * x[0].atan() + self.process_var.sqrt() * v;
    }

    fn sample_observation(&self, theta: &[f64], x: &[f64], rng: &mut SimRng, out: &mut [f64]) {
        let e: f64 = rng.sample(StandardNormal);
        out[0] = theta[1] * x[0] + self.measurement_var.sqrt() * e;
    }

    fn transition_logdensity(&self, theta: &[f64], x_next: &[f64], x: &[f64]) -> f64 {
        normal_logpdf(x_next[0] - theta[0] * x[0].atan(), self.process_var)
    }

    fn observation_logdensity(&self, theta: &[f64], y: &[f64], x: &[f64]) -> f64 {
        normal_logpdf(y[0] - theta[1] * x[0], self.measurement_var)
    }

    fn add_transition_score(&self, theta: &[f64], x_next: &[f64], x: &[f64], scale: f64, acc: &mut [f64]) {
        let a = x[0].atan();
        acc[0] += scale * a * (x_next[0] - theta[0] * a) / self.process_var;
    }

    fn add_observation_score(&self, theta: &[f64], y: &[f64], x: &[f64], scale: f64, acc: &mut [f64]) {
        acc[1] += scale * x[0] * (y[0] - theta[1] * x[0]) / self.measurement_var;
    }
}

impl AdditiveGaussian for BenchmarkModel2 {
    fn initial_mean(&self) -> DVector<f64> {
        DVector::zeros(1)
    }

    fn initial_cov(&self) -> DMatrix<f64> {
        scalar(1.0)
    }

    fn transition_mean(&self, theta: &[f64], x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, theta[0] * x[0].atan())
    }

    fn transition_jacobian(&self, theta: &[f64], x: &DVector<f64>) -> DMatrix<f64> {
        scalar(theta[0] / (1.0 + x[0] * x[0]))
    }

    fn measurement_mean(&self, theta: &[f64], x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, theta[1] * x[0])
    }

    fn measurement_jacobian(&self, theta: &[f64], _x: &DVector<f64>) -> DMatrix<f64> {
        scalar(theta[1])
    }

    fn process_cov(&self, _theta: &[f64]) -> DMatrix<f64> {
        scalar(self.process_var)
    }

    fn measurement_cov(&self, _theta: &[f64]) -> DMatrix<f64> {
        scalar(self.measurement_var)
    }

    fn process_cov_derivs(&self, _theta: &[f64]) -> Vec<DMatrix<f64>> {
        vec![scalar(0.0); 2]
    }

    fn measurement_cov_derivs(&self, _theta: &[f64]) -> Vec<DMatrix<f64>> {
        vec![scalar(0.0); 2]
    }

    fn linear_dynamics(&self, _theta: &[f64]) -> Option<LinearPart> {
        None
    }

    fn affine_measurement(&self, theta: &[f64]) -> Option<AffinePart> {
        Some(AffinePart {
            matrix: scalar(theta[1]),
            offset: DVector::zeros(1),
            matrix_derivs: vec![scalar(0.0), scalar(1.0)],
            offset_derivs: vec![DVector::zeros(1), DVector::zeros(1)],
        })
    }
}
