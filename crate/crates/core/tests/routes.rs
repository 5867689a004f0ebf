use ewa_core::lasso::fit_lasso;
use ewa_core::orthonormal::{ewa_closed_form, ShrinkageInputs};
use ewa_core::quadrature::{oracle_integrals, QuadratureGrid};
use ewa_core::sampler::{ewa_from_samples, sample_posterior, SamplerConfig, SamplerProfile};
use ewa_core::{RegressionProblem, Tuning};
use nalgebra::{DMatrix, DVector};

/// Deterministic, well-spread pseudo-data.
fn wave(i: usize, j: usize) -> f64 {
    ((i * 7 + j * 13 + 1) as f64 * 0.731).sin() * 1.7
}

fn general_problem(lambda: f64, tau: f64) -> RegressionProblem {
    let n = 12;
    let x = DMatrix::from_fn(n, 2, wave);
    let y = DVector::from_fn(n, |i, _| x[(i, 0)] * 1.2 + wave(i, 5));
    RegressionProblem::new(x, y, Tuning::new(1.0, lambda, tau).unwrap()).unwrap()
}

#[test]
fn quadrature_agrees_with_closed_form_on_orthonormal_design() {
    // columns of sqrt(n) * identity blocks: X^T X / n = I
    let n = 4;
    let x = DMatrix::from_fn(n, 2, |i, j| if i % 2 == j { 2f64.sqrt() } else { 0.0 });
    let y = DVector::from_vec(vec![1.3, -0.2, 0.4, 0.9]);
    let problem = RegressionProblem::new(x, y, Tuning::new(1.0, 0.6, 0.2).unwrap()).unwrap();
    let exact = ewa_closed_form(&ShrinkageInputs::from_problem(&problem).unwrap());
    let quad = oracle_integrals(&problem, &QuadratureGrid::auto(&problem).unwrap()).unwrap();
    assert!((exact.mean - &quad.estimate.mean).amax() < 1e-8);
    assert!((exact.covariance - &quad.estimate.covariance).amax() < 1e-8);
}

#[test]
fn sampler_agrees_with_quadrature_on_general_design() {
    let problem = general_problem(0.4, 0.05);
    let quad = oracle_integrals(&problem, &QuadratureGrid::auto(&problem).unwrap()).unwrap();
    let config = SamplerConfig {
        n_samples: 40_000,
        ..SamplerConfig::for_problem(&problem, SamplerProfile::Accurate, 11)
    };
    let samples = sample_posterior(&problem, &config).unwrap();
    let est = ewa_from_samples(&samples);
    // posterior sd is below sqrt(tau / eigmin); 0.02 is many Monte Carlo errors
    assert!(
        (&est.mean - &quad.estimate.mean).amax() < 0.02,
        "{:?} vs {:?}",
        est.mean,
        quad.estimate.mean
    );
}

#[test]
fn small_temperature_mean_approaches_lasso() {
    let lasso = fit_lasso(&general_problem(0.4, 1.0), 1e-14, 100_000)
        .unwrap()
        .coefficients;
    let distance = |tau: f64| {
        let problem = general_problem(0.4, tau);
        let quad = oracle_integrals(&problem, &QuadratureGrid::auto(&problem).unwrap()).unwrap();
        (quad.estimate.mean - &lasso).norm()
    };
    let (far, near) = (distance(1e-2), distance(1e-5));
    assert!(near < far && near < 1e-3, "{far} {near}");
}
