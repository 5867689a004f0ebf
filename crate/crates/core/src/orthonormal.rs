//! Exact EWA for orthonormal designs (`X^T X / n = I`).
//!
//! The pseudo-posterior factorises over coordinates; each factor is a
//! two-component mixture of truncated Gaussians, which gives the posterior
//! mean as a thresholding rule `sign(b)(|b| - lambda w(tau, lambda, |b|))`
//! in terms of the least-squares coefficient `b`, plus closed forms for the
//! posterior variance and for `H(tau)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{EstimateMethod, EwaEstimate};
use crate::linalg::least_squares_pinv;
use crate::model::RegressionProblem;
use crate::special::{ln_psi_unit, psi_unit_nonneg};

/// Number of grid points used to reproduce the `h(lambda_bar, .)` curves.
pub const H_CURVE_POINTS: usize = 4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageInputs {
    pub tau: f64,
    pub lambda: f64,
    pub ls_coefficients: DVector<f64>,
}

impl ShrinkageInputs {
    pub fn new(tau: f64, lambda: f64, ls_coefficients: DVector<f64>) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be > 0, got {tau}")));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda must be > 0, got {lambda}")));
        }
        if ls_coefficients.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("least-squares coefficients".into()));
        }
        Ok(Self {
            tau,
            lambda,
            ls_coefficients,
        })
    }

    /// Inputs for a problem whose design is asserted orthonormal.
    pub fn from_problem(problem: &RegressionProblem) -> Result<Self> {
        Self::new(problem.tau(), problem.lambda(), ls_coefficients(problem))
    }
}

/// Least-squares coefficients `(1/n) Sigma^+ X^T y` (minimum-norm solution).
pub fn ls_coefficients(problem: &RegressionProblem) -> DVector<f64> {
    least_squares_pinv(problem.design(), problem.response())
}

/// Largest entry of `|X^T X / n - I|`.
pub fn orthonormality_defect(problem: &RegressionProblem) -> f64 {
    let g = problem.gram();
    (g - DMatrix::identity(problem.p(), problem.p())).amax()
}

/// `w` and `1 - w`, evaluated in log space so neither overflows nor cancels.
fn weight_pair(tau: f64, lambda: f64, t: f64) -> (f64, f64) {
    let s = tau.sqrt();
    let (a, b) = (lambda / s, t / s);
    let d = ln_psi_unit(a - b) - ln_psi_unit(a + b);
    let w = (0.5 * d).tanh();
    // 1 - tanh(d/2) = 2 / (1 + e^d)
    let complement = if d > 0.0 {
        2.0 * (-d).exp() / (1.0 + (-d).exp())
    } else {
        2.0 / (1.0 + d.exp())
    };
    (w, complement)
}

/// Shrinkage weight `(psi(lambda - t) - psi(lambda + t)) / (psi(lambda - t) + psi(lambda + t))`
/// with `psi = psi(tau, .)`. Lies in `[0, 1)` for `t >= 0` and is odd in `t`.
pub fn shrinkage_weight(tau: f64, lambda: f64, t: f64) -> f64 {
    weight_pair(tau, lambda, t).0
}

/// Posterior mean and variance of one coordinate whose least-squares value is `b`.
pub fn coordinate_moments(tau: f64, lambda: f64, b: f64) -> (f64, f64) {
    let (w, wc) = weight_pair(tau, lambda, b.abs());
    let mean = b.signum() * (b.abs() - lambda * w);
    let s = tau.sqrt();
    let (a, z) = (lambda / s, b.abs() / s);
    // Mixture weights of the positive / negative half-lines.
    let (p_pos, p_neg) = (1.0 - 0.5 * wc, 0.5 * wc);
    let inv_root_2pi = 1.0 / (2.0 * PI).sqrt();
    let second = |lo: f64, centre: f64, sign: f64| -> f64 {
        // Truncated N(centre, 1) on the half-line beyond 0 in direction `sign`;
        // `lo` is the standardised truncation point.
        let mills = if lo >= 0.0 {
            inv_root_2pi / psi_unit_nonneg(lo)
        } else {
            inv_root_2pi * (-ln_psi_unit(lo)).exp()
        };
        let m = centre + sign * mills;
        let var = 1.0 + lo * mills - mills * mills;
        var.max(0.0) + m * m
    };
    let e2_pos = second(a - z, z - a, 1.0);
    let e2_neg = second(a + z, z + a, -1.0);
    let scaled_mean = mean / s;
    let var = (p_pos * e2_pos + p_neg * e2_neg - scaled_mean * scaled_mean).max(0.0);
    (mean, var * tau)
}

/// Closed-form EWA with its diagonal posterior covariance and `H(tau)`.
pub fn ewa_closed_form(inputs: &ShrinkageInputs) -> EwaEstimate {
    let p = inputs.ls_coefficients.len();
    let mut mean = DVector::zeros(p);
    let mut var = DVector::zeros(p);
    for (j, &b) in inputs.ls_coefficients.iter().enumerate() {
        let (m, v) = coordinate_moments(inputs.tau, inputs.lambda, b);
        mean[j] = m;
        var[j] = v;
    }
    EwaEstimate::exact(
        mean,
        DMatrix::from_diagonal(&var),
        Some(h_closed_form(inputs)),
        EstimateMethod::ClosedForm,
    )
}

/// `H(tau) = sum_j lambda (|b_j| - lambda w)(1 - w)`.
pub fn h_closed_form(inputs: &ShrinkageInputs) -> f64 {
    inputs
        .ls_coefficients
        .iter()
        .map(|&b| {
            let t = b.abs();
            let (w, wc) = weight_pair(inputs.tau, inputs.lambda, t);
            inputs.lambda * (t - inputs.lambda * w) * wc
        })
        .sum()
}

/// `h(lambda_bar, z) = lambda_bar (z - lambda_bar w(1, lambda_bar, z)) (1 - w(1, lambda_bar, z))`.
pub fn h_value(lambda_bar: f64, z: f64) -> f64 {
    let (w, wc) = weight_pair(1.0, lambda_bar, z);
    lambda_bar * (z - lambda_bar * w) * wc
}

pub fn h_curve(lambda_bar: f64, z_grid: &[f64]) -> Result<Vec<f64>> {
    if !(lambda_bar > 0.0 && lambda_bar.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "lambda_bar must be > 0, got {lambda_bar}"
        )));
    }
    if let Some(z) = z_grid.iter().find(|z| !(**z >= 0.0) || !z.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "grid values must be finite and >= 0, got {z}"
        )));
    }
    Ok(z_grid.iter().map(|&z| h_value(lambda_bar, z)).collect())
}

/// Uniform grid on `[0, 2 lambda_bar]` with [`H_CURVE_POINTS`] points.
pub fn h_curve_grid(lambda_bar: f64) -> Vec<f64> {
    linspace(0.0, 2.0 * lambda_bar, H_CURVE_POINTS)
}

pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force posterior moments of one coordinate by Gauss-Legendre
    /// panels on each half-line (the density has a kink at 0).
    fn brute_moments(tau: f64, lambda: f64, b: f64) -> (f64, f64, f64) {
        let s = tau.sqrt();
        let lo = b.min(0.0) - 40.0 * s - 40.0 * tau / lambda;
        let hi = b.max(0.0) + 40.0 * s + 40.0 * tau / lambda;
        let logd = |u: f64| -(0.5 * (u - b).powi(2) + lambda * u.abs()) / tau;
        let peak = logd(crate::linalg::soft_threshold(b, lambda));
        let nodes = [
            (-0.906_179_845_938_664, 0.236_926_885_056_189_08),
            (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (0.0, 0.568_888_888_888_888_9),
            (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (0.906_179_845_938_664, 0.236_926_885_056_189_08),
        ];
        let mut m = [0.0; 4];
        for (a, c) in [(lo, 0.0), (0.0, hi)] {
            let panels = 20_000;
            let h = (c - a) / panels as f64;
            for k in 0..panels {
                let mid = a + (k as f64 + 0.5) * h;
                for (x, w) in nodes {
                    let u = mid + 0.5 * h * x;
                    let d = w * 0.5 * h * (logd(u) - peak).exp();
                    m[0] += d;
                    m[1] += d * u;
                    m[2] += d * u * u;
                    m[3] += d * (u * u + lambda * u.abs());
                }
            }
        }
        let mean = m[1] / m[0];
        (mean, m[2] / m[0] - mean * mean, m[3] / m[0])
    }

    #[test]
    fn weight_limits() {
        assert_eq!(shrinkage_weight(0.3, 1.0, 0.0), 0.0);
        assert!((shrinkage_weight(1e-8, 1.0, 0.5) - 0.5).abs() < 1e-4);
        assert!(shrinkage_weight(1e-8, 1.0, 2.0) >= 1.0 - 1e-6);
        assert!((shrinkage_weight(0.7, 1.3, -0.4) + shrinkage_weight(0.7, 1.3, 0.4)).abs() < 1e-15);
    }

    #[test]
    fn weight_monotone_in_unit_interval() {
        for (tau, lambda) in [(1.0f64, 1.0), (0.01, 2.0), (1e-6, 0.5), (10.0, 0.1)] {
            let mut prev = -1.0;
            for k in 0..2000 {
                let t = k as f64 * 0.005 * (lambda + tau.sqrt());
                let w = shrinkage_weight(tau, lambda, t);
                // w < 1 exactly, but rounds to 1 once 1 - w drops below half an ulp
                assert!((0.0..=1.0).contains(&w), "w={w}");
                assert!(weight_pair(tau, lambda, t).1 > 0.0 || w == 1.0);
                assert!(w >= prev);
                prev = w;
            }
        }
    }

    #[test]
    fn closed_form_matches_brute_force() {
        for (tau, lambda, b) in [(0.5, 1.0, 1.3), (0.1, 0.7, -0.2), (2.0, 0.3, 4.0), (0.01, 1.0, 0.95)] {
            let (m, v) = coordinate_moments(tau, lambda, b);
            let (bm, bv, _) = brute_moments(tau, lambda, b);
            assert!((m - bm).abs() < 1e-9, "mean {m} vs {bm}");
            assert!((v - bv).abs() < 1e-9, "var {v} vs {bv}");
        }
    }

    #[test]
    fn h_matches_definition() {
        // H = tau - int G + G(mean) with G(u) = u^2 + lambda |u| for p = 1.
        let (tau, lambda, b) = (0.5, 1.0, 1.3);
        let inputs = ShrinkageInputs::new(tau, lambda, DVector::from_element(1, b)).unwrap();
        let (mean, _, eg) = brute_moments(tau, lambda, b);
        let h_def = tau - eg + mean * mean + lambda * mean.abs();
        assert!((h_closed_form(&inputs) - h_def).abs() < 1e-8);
    }

    #[test]
    fn ewa_limits_and_shrinkage() {
        let zero = ShrinkageInputs::new(0.4, 1.0, DVector::zeros(3)).unwrap();
        let est = ewa_closed_form(&zero);
        assert!(est.mean.iter().all(|&m| m == 0.0));
        assert_eq!(h_closed_form(&zero), 0.0);

        let cold = ShrinkageInputs::new(1e-8, 1.0, DVector::from_vec(vec![2.0, 0.5])).unwrap();
        let est = ewa_closed_form(&cold);
        assert!((est.mean[0] - 1.0).abs() < 1e-4);
        assert!(est.mean[1].abs() < 1e-4);

        let inputs = ShrinkageInputs::new(0.3, 0.8, DVector::from_vec(vec![-2.0, 0.1, 0.9, -0.5])).unwrap();
        let est = ewa_closed_form(&inputs);
        for (m, b) in est.mean.iter().zip(inputs.ls_coefficients.iter()) {
            assert!(m.abs() <= b.abs());
            assert!(m * b >= 0.0);
        }
    }

    #[test]
    fn h_scale_invariance() {
        let bbar = [0.3, 2.5, 11.0, 0.0];
        let lbar = 3.0;
        let reference: f64 = bbar.iter().map(|&z: &f64| h_value(lbar, z.abs())).sum();
        for tau in [0.1, 1.0, 10.0] {
            let s = f64::sqrt(tau);
            let ls = DVector::from_iterator(4, bbar.iter().map(|b| b * s));
            let inputs = ShrinkageInputs::new(tau, lbar * s, ls).unwrap();
            let ratio = h_closed_form(&inputs) / tau;
            assert!(((ratio - reference) / reference).abs() < 1e-12);
        }
    }

    #[test]
    fn h_curve_values() {
        assert_eq!(h_value(10.0, 0.0), 0.0);
        assert!(h_value(10.0, 50.0) <= 1e-3);
        let curve = h_curve(20.0, &h_curve_grid(20.0)).unwrap();
        assert!(curve.iter().all(|&h| (0.0..=1.0 + 1e-12).contains(&h)));
        assert!(h_curve(0.0, &[1.0]).is_err());
        assert!(h_curve(1.0, &[-1.0]).is_err());
    }

    #[test]
    fn h_bounded_by_p_tau() {
        for (tau, lambda) in [(0.01, 0.5), (1.0, 1.0), (4.0, 0.2)] {
            let inputs = ShrinkageInputs::new(tau, lambda, DVector::from_vec(vec![0.0, 0.3, -1.0, 5.0, 0.05])).unwrap();
            let h = h_closed_form(&inputs);
            assert!(h >= 0.0 && h <= 5.0 * tau);
        }
    }
}
