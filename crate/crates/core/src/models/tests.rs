use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use super::*;

/// Central finite differences of log f + log g in θ.
fn fd_xi(model: &dyn StateSpaceModel, theta: &[f64], xn: Option<&[f64]>, x: &[f64], y: &[f64]) -> Vec<f64> {
    let f = |th: &[f64]| {
        let t = xn.map(|xn| model.transition_logdensity(th, xn, x)).unwrap_or(0.0);
        t + model.observation_logdensity(th, y, x)
    };
    (0..theta.len())
        .map(|j| {
            let h = 1e-5 * theta[j].abs().max(1.0);
            let mut p = theta.to_vec();
            let mut m = theta.to_vec();
            p[j] += h;
            m[j] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn assert_close_rel(a: &[f64], b: &[f64], tol: f64) {
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol * x.abs().max(1.0), "{a:?} vs {b:?}");
    }
}

fn two_param_lgss() -> LinearGaussianModel {
    // F = 0.2 + θ₁ (2-D diagonal), Q depends on θ₂, G fixed.
    let dx = 2;
    let dy = 1;
    let mut j1 = ParamJacobian::zeros(dx, dy);
    j1.f = DMatrix::identity(2, 2);
    let mut j2 = ParamJacobian::zeros(dx, dy);
    j2.q = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
    j2.g = DMatrix::from_row_slice(1, 2, &[0.3, -0.1]);
    let spec = LinearGaussianSpec {
        f: DMatrix::from_row_slice(2, 2, &[0.2, 0.1, 0.0, 0.2]),
        g: DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
        q: DMatrix::identity(2, 2) * 0.5,
        r: DMatrix::from_element(1, 1, 0.3),
        mu: DVector::zeros(2),
        p1: DMatrix::identity(2, 2),
        jacobians: vec![j1, j2],
    };
    LinearGaussianModel::new(spec).unwrap()
}

#[test]
fn model1_xi_examples() {
    let m = make_model1();
    assert_eq!(m.xi(&[1.0, 0.0], None, &[0.0], &[0.0]), vec![0.0, 0.0]);
    let xi = m.xi(&[0.5, 0.3], None, &[2.0], &[1.5]);
    assert_close_rel(&xi, &[40.0, 20.0], 1e-12);
    assert_close_rel(&xi, &fd_xi(&m, &[0.5, 0.3], None, &[2.0], &[1.5]), 1e-6);
    // transition contributes nothing: θ does not enter the dynamics
    let with_next = m.xi(&[0.5, 0.3], Some(&[3.0]), &[2.0], &[1.5]);
    assert_eq!(xi, with_next);
}

#[test]
fn model1_transition_mode() {
    let m = make_model1();
    for x in [-2.0, 0.0, 0.7] {
        for theta in [[0.5, 0.3], [-3.0, 10.0]] {
            let v = m.transition_logdensity(&theta, &[f64::atan(x)], &[x]);
            assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-14);
        }
    }
}

#[test]
fn model2_xi_examples() {
    let m = make_model2();
    for theta in [[0.7, 0.5], [-2.0, 3.0]] {
        let mut acc = [0.0; 2];
        m.add_transition_score(&theta, &[1.3], &[0.0], 1.0, &mut acc);
        assert_eq!(acc[0], 0.0);
    }
    let mut acc = [0.0; 2];
    m.add_transition_score(&[0.7, 0.5], &[1.0], &[1.0], 1.0, &mut acc);
    let a = 1.0f64.atan();
    assert!((acc[0] - a * (1.0 - 0.7 * a)).abs() < 1e-14);
    assert!((acc[0] - 0.3536).abs() < 1e-4);
    let fd = fd_xi(&m, &[0.7, 0.5], Some(&[1.0]), &[1.0], &[0.0]);
    let full = m.xi(&[0.7, 0.5], Some(&[1.0]), &[1.0], &[0.0]);
    assert_close_rel(&full, &fd, 1e-6);
}

#[test]
fn model2_with_unit_gain_matches_model1_dynamics() {
    let m1 = make_model1();
    let m2 = make_model2();
    for (x, xn) in [(0.3, -0.4), (2.0, 1.1), (-5.0, 0.0)] {
        let a = m1.transition_logdensity(&[0.5, 0.3], &[xn], &[x]);
        let b = m2.transition_logdensity(&[1.0, 0.5], &[xn], &[x]);
        assert_eq!(a, b);
    }
}

#[test]
fn scalar_lgss_logdensity_and_zero_jacobian_score() {
    let one = DMatrix::from_element(1, 1, 1.0);
    let sys = LinearSystem {
        f: one.clone(),
        g: one.clone(),
        q: one.clone(),
        r: one.clone(),
        mu: DVector::zeros(1),
        p1: one,
    };
    let m = make_linear_gaussian(LinearGaussianSpec::fixed(sys)).unwrap();
    let v = m.transition_logdensity(&[], &[1.5], &[0.5]);
    assert!((v - (-0.5 * (2.0 * PI).ln() - 0.5)).abs() < 1e-14);
    assert!(m.xi(&[], Some(&[1.0]), &[2.0], &[3.0]).is_empty());

    let mut spec = LinearGaussianSpec::default_scalar();
    for j in &mut spec.jacobians {
        *j = ParamJacobian::zeros(1, 1);
    }
    spec.f[(0, 0)] = 0.5;
    spec.r[(0, 0)] = 0.2;
    let m = make_linear_gaussian(spec).unwrap();
    assert_eq!(m.xi(&[0.3, 0.1], Some(&[1.0]), &[2.0], &[3.0]), vec![0.0, 0.0]);
}

#[test]
fn lgss_xi_for_f_entry_matches_finite_differences() {
    let m = make_linear_gaussian(LinearGaussianSpec::default_scalar()).unwrap();
    let theta = [0.6, 0.4];
    let xi = m.xi(&theta, Some(&[0.9]), &[-0.4], &[0.2]);
    assert_close_rel(&xi, &fd_xi(&m, &theta, Some(&[0.9]), &[-0.4], &[0.2]), 1e-6);
}

#[test]
fn invalid_linear_spec_is_rejected() {
    let mut spec = LinearGaussianSpec::fixed(LinearSystem {
        f: DMatrix::from_element(1, 1, 1.0),
        g: DMatrix::from_element(1, 1, 1.0),
        q: DMatrix::from_element(1, 1, -1.0),
        r: DMatrix::from_element(1, 1, 1.0),
        mu: DVector::zeros(1),
        p1: DMatrix::from_element(1, 1, 1.0),
    });
    assert!(matches!(make_linear_gaussian(spec.clone()), Err(Error::InvalidSpec(_))));
    spec.q = DMatrix::zeros(2, 2);
    assert!(make_linear_gaussian(spec).is_err());
    let s = LinearGaussianSpec::default_scalar();
    assert!(matches!(s.evaluate(&[0.5, -1.0]), Err(Error::InvalidSpec(_))));
}

#[test]
fn linear_config_round_trip() {
    let m = two_param_lgss();
    let cfg = LinearGaussianConfig::from(m.spec());
    let text = toml::to_string(&cfg).unwrap();
    let back: LinearGaussianConfig = toml::from_str(&text).unwrap();
    let spec = LinearGaussianSpec::try_from(back).unwrap();
    assert_eq!(&spec, m.spec());
}

#[test]
fn linear_config_defaults_missing_jacobians_to_zero() {
    let text = r#"
        f = [[0.0]]
        g = [[1.0]]
        q = [[1.0]]
        r = [[0.5]]
        mu = [0.0]
        p1 = [[2.0]]
        [[params]]
        f = [[1.0]]
    "#;
    let cfg: LinearGaussianConfig = toml::from_str(text).unwrap();
    let spec = LinearGaussianSpec::try_from(cfg).unwrap();
    assert_eq!(spec.n_params(), 1);
    assert_eq!(spec.jacobians[0].q, DMatrix::zeros(1, 1));
    let sys = spec.evaluate(&[0.8]).unwrap();
    assert_eq!(sys.f[(0, 0)], 0.8);
}

#[test]
fn simulate_is_deterministic() {
    let m = make_model1();
    let (x1, y1) = simulate(&m, &[0.5, 0.3], 1000, 42).unwrap();
    let (x2, y2) = simulate(&m, &[0.5, 0.3], 1000, 42).unwrap();
    assert_eq!(x1.len(), 1000);
    assert_eq!(y1.len(), 1000);
    assert_eq!(x1, x2);
    assert_eq!(y1, y2);
    let (x3, _) = simulate(&m, &[0.5, 0.3], 1000, 43).unwrap();
    assert_ne!(x1, x3);
}

#[test]
fn simulate_single_step() {
    let m = make_model2();
    let (x, y) = simulate(&m, &[0.7, 0.5], 1, 3).unwrap();
    assert_eq!((x.len(), y.len()), (1, 1));
    assert!(simulate(&m, &[0.7, 0.5], 0, 3).is_err());
    assert!(simulate(&m, &[0.7], 10, 3).is_err());
}

#[test]
fn noise_free_measurements_are_exact() {
    let m = BenchmarkModel1::with_noise(1.0, 0.0);
    let (x, y) = simulate(&m, &[0.5, 0.3], 200, 9).unwrap();
    for (xt, yt) in x.iter().zip(y.iter()) {
        assert_eq!(yt[0], 0.5 * xt[0] + 0.3);
    }
}

#[test]
fn diverging_simulation_reports_time() {
    let sys = LinearSystem {
        f: DMatrix::from_element(1, 1, 1e200),
        g: DMatrix::from_element(1, 1, 1.0),
        q: DMatrix::from_element(1, 1, 1.0),
        r: DMatrix::from_element(1, 1, 1.0),
        mu: DVector::from_element(1, 10.0),
        p1: DMatrix::from_element(1, 1, 1.0),
    };
    let m = make_linear_gaussian(LinearGaussianSpec::fixed(sys)).unwrap();
    match simulate(&m, &[], 10, 1) {
        Err(Error::SimulationDiverged { t }) => assert!(t == 1 || t == 2),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn model_lookup() {
    for name in MODEL_NAMES {
        let m = model_by_name(name, None).unwrap();
        assert_eq!(m.name(), name);
        assert_eq!(m.n_params(), 2);
    }
    assert!(matches!(model_by_name("model3", None), Err(Error::Config(_))));
}

#[test]
fn parameter_vector_validation() {
    assert!(ParameterVector::new(vec![]).is_err());
    assert!(ParameterVector::new(vec![1.0, f64::NAN]).is_err());
    let p = ParameterVector::new(vec![0.5, 0.3]).unwrap();
    assert_eq!(p.len(), 2);
    let json = serde_json::to_string(&p).unwrap();
    assert_eq!(json, "[0.5,0.3]");
    assert!(serde_json::from_str::<ParameterVector>("[]").is_err());
}

proptest! {
    #[test]
    fn xi_matches_finite_differences(
        t1 in -2.0f64..2.0, t2 in -2.0f64..2.0,
        x in -3.0f64..3.0, xn in -3.0f64..3.0, y in -3.0f64..3.0,
    ) {
        let theta = [t1, t2];
        for m in [&make_model1() as &dyn StateSpaceModel, &make_model2()] {
            let xi = m.xi(&theta, Some(&[xn]), &[x], &[y]);
            let fd = fd_xi(m, &theta, Some(&[xn]), &[x], &[y]);
            for (a, b) in xi.iter().zip(&fd) {
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn lgss_xi_matches_finite_differences(
        t1 in -0.5f64..0.5, t2 in 0.0f64..1.0,
        x0 in -2.0f64..2.0, x1 in -2.0f64..2.0,
        n0 in -2.0f64..2.0, n1 in -2.0f64..2.0, y in -2.0f64..2.0,
    ) {
        let m = two_param_lgss();
        let theta = [t1, t2];
        let xi = m.xi(&theta, Some(&[n0, n1]), &[x0, x1], &[y]);
        let fd = fd_xi(&m, &theta, Some(&[n0, n1]), &[x0, x1], &[y]);
        for (a, b) in xi.iter().zip(&fd) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{} vs {}", a, b);
        }
    }
}
