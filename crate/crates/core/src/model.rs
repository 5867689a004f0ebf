//! Regression problem, losses, the potential and tuning-parameter calibration.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::linalg::l1_norm;

pub type CoefficientVector = DVector<f64>;

/// Absolute part of the slack tolerance used for deterministic bound checks.
pub const NUMERIC_ABS_TOL: f64 = 1e-10;
/// Relative part of the slack tolerance used for deterministic bound checks.
pub const NUMERIC_REL_TOL: f64 = 1e-10;

/// Noise level and the `(lambda, tau)` tuning pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tuning {
    pub sigma: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl Tuning {
    pub fn new(sigma: f64, lambda: f64, tau: f64) -> Result<Self> {
        let t = Self { sigma, lambda, tau };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Linear model `y = X beta* + xi` together with its tuning parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    design: DMatrix<f64>,
    response: DVector<f64>,
    tuning: Tuning,
    columns_scaled: bool,
}

impl RegressionProblem {
    pub fn new(design: DMatrix<f64>, response: DVector<f64>, tuning: Tuning) -> Result<Self> {
        let (n, p) = design.shape();
        if n == 0 || p == 0 {
            return Err(Error::DimensionMismatch(format!("design is {n}x{p}")));
        }
        ensure_dims("response length", n, response.len())?;
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design".into()));
        }
        if response.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response".into()));
        }
        tuning.validate()?;
        let columns_scaled = max_column_energy(&design) <= 1.0 + 1e-12;
        Ok(Self {
            design,
            response,
            tuning,
            columns_scaled,
        })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.response
    }

    pub fn tuning(&self) -> Tuning {
        self.tuning
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn p(&self) -> usize {
        self.design.ncols()
    }

    pub fn sigma(&self) -> f64 {
        self.tuning.sigma
    }

    pub fn lambda(&self) -> f64 {
        self.tuning.lambda
    }

    pub fn tau(&self) -> f64 {
        self.tuning.tau
    }

    /// Whether `max_j ||x^j||^2 / n <= 1` holds.
    pub fn columns_scaled(&self) -> bool {
        self.columns_scaled
    }

    pub fn with_tuning(&self, tuning: Tuning) -> Result<Self> {
        tuning.validate()?;
        Ok(Self { tuning, ..self.clone() })
    }

    pub fn with_response(&self, response: DVector<f64>) -> Result<Self> {
        Self::new(self.design.clone(), response, self.tuning)
    }

    /// Returns a copy whose columns are rescaled so that `||x^j||^2 = n`
    /// (all-zero columns are left untouched), plus the applied factors.
    pub fn rescaled(&self) -> (Self, DVector<f64>) {
        let n = self.n() as f64;
        let mut design = self.design.clone();
        let mut factors = DVector::from_element(self.p(), 1.0);
        for (j, mut col) in design.column_iter_mut().enumerate() {
            let norm2 = col.norm_squared();
            if norm2 > 0.0 {
                let f = (n / norm2).sqrt();
                col *= f;
                factors[j] = f;
            }
        }
        let problem = Self::new(design, self.response.clone(), self.tuning).expect("rescaling preserves validity");
        (problem, factors)
    }

    /// Gram matrix `X^T X / n`.
    pub fn gram(&self) -> DMatrix<f64> {
        self.design.tr_mul(&self.design) / self.n() as f64
    }

    /// `X^T y / n`.
    pub fn correlation(&self) -> DVector<f64> {
        self.design.tr_mul(&self.response) / self.n() as f64
    }

    pub(crate) fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        ensure_dims("coefficient length", self.p(), v.len())
    }
}

/// `max_j ||x^j||^2 / n`.
pub fn max_column_energy(design: &DMatrix<f64>) -> f64 {
    let n = design.nrows() as f64;
    design.column_iter().map(|c| c.norm_squared() / n).fold(0.0, f64::max)
}

/// Prediction loss `(1/n) ||X (a - b)||^2`.
pub fn prediction_loss(problem: &RegressionProblem, a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    problem.check_len(a)?;
    problem.check_len(b)?;
    let diff = a - b;
    Ok((problem.design() * diff).norm_squared() / problem.n() as f64)
}

/// Penalised empirical risk `V_n(beta) = (1/2n) ||y - X beta||^2 + lambda ||beta||_1`.
pub fn potential(problem: &RegressionProblem, beta: &DVector<f64>) -> Result<f64> {
    problem.check_len(beta)?;
    let resid = problem.response() - problem.design() * beta;
    Ok(resid.norm_squared() / (2.0 * problem.n() as f64) + problem.lambda() * l1_norm(beta))
}

/// `G(u) = (1/n) ||X u||^2 + lambda ||u||_1`, the convex functional behind `H(tau)`.
pub fn peakedness_functional(problem: &RegressionProblem, u: &DVector<f64>) -> Result<f64> {
    problem.check_len(u)?;
    Ok((problem.design() * u).norm_squared() / problem.n() as f64 + problem.lambda() * l1_norm(u))
}

/// Smallest `lambda` satisfying `lambda >= 2 sigma sqrt((2/n) log(p/delta))`.
pub fn calibrate_lambda(sigma: f64, n: usize, p: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0,1), got {delta}")));
    }
    if !(sigma >= 0.0) || n == 0 || p == 0 {
        return Err(Error::InvalidParameter("sigma >= 0, n >= 1, p >= 1 required".into()));
    }
    let log_term = (p as f64 / delta).ln().max(0.0);
    Ok(2.0 * sigma * (2.0 / n as f64 * log_term).sqrt())
}

/// One inequality check: `lhs <= rhs` up to `tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub context: BTreeMap<String, String>,
}

impl BoundReport {
    /// Deterministic check with the default float-noise tolerance.
    pub fn analytic(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        let tol = NUMERIC_ABS_TOL + NUMERIC_REL_TOL * lhs.abs().max(rhs.abs());
        Self::with_tolerance(name, lhs, rhs, tol)
    }

    /// Check with an explicit tolerance (e.g. three Monte Carlo standard errors).
    pub fn with_tolerance(name: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let slack = rhs - lhs;
        Self {
            name: name.into(),
            lhs,
            rhs,
            slack,
            tolerance,
            passed: slack >= -tolerance,
            context: BTreeMap::new(),
        }
    }

    pub fn with_context(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.context.insert(key.into(), value.to_string());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tuning() -> Tuning {
        Tuning::new(1.0, 1.0, 0.1).unwrap()
    }

    #[test]
    fn loss_identity_design() {
        let pb = RegressionProblem::new(DMatrix::identity(2, 2), DVector::zeros(2), tuning()).unwrap();
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let b = DVector::zeros(2);
        assert_close!(prediction_loss(&pb, &a, &b).unwrap(), 0.5, 1e-15);
        assert_eq!(prediction_loss(&pb, &a, &a).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_elementwise_loop() {
        let x = DMatrix::from_fn(5, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.7 + 0.1 * j as f64);
        let pb = RegressionProblem::new(x.clone(), DVector::zeros(5), tuning()).unwrap();
        let a = DVector::from_vec(vec![0.3, -1.1, 2.0]);
        let b = DVector::from_vec(vec![-0.4, 0.5, 1.25]);
        let mut oracle = 0.0;
        for i in 0..5 {
            let mut dot = 0.0;
            for j in 0..3 {
                dot += x[(i, j)] * (a[j] - b[j]);
            }
            oracle += dot * dot;
        }
        oracle /= 5.0;
        assert_close!(prediction_loss(&pb, &a, &b).unwrap(), oracle, 1e-12);
    }

    #[test]
    fn potential_hand_values() {
        let pb = RegressionProblem::new(DMatrix::zeros(3, 2), DVector::zeros(3), tuning()).unwrap();
        assert_eq!(potential(&pb, &DVector::zeros(2)).unwrap(), 0.0);

        let pb = RegressionProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 2.0),
            tuning(),
        )
        .unwrap();
        assert_close!(potential(&pb, &DVector::from_element(1, 1.0)).unwrap(), 1.5, 1e-15);
    }

    #[test]
    fn potential_matches_naive_loop() {
        let x = DMatrix::from_fn(4, 3, |i, j| (i as f64 + 1.0).sin() * (j as f64 - 0.5));
        let y = DVector::from_fn(4, |i, _| i as f64 * 0.3 - 0.2);
        let t = Tuning::new(1.0, 0.37, 1.0).unwrap();
        let pb = RegressionProblem::new(x.clone(), y.clone(), t).unwrap();
        let beta = DVector::from_vec(vec![0.5, -2.0, 0.0]);
        let mut rss = 0.0;
        for i in 0..4 {
            let mut fit = 0.0;
            for j in 0..3 {
                fit += x[(i, j)] * beta[j];
            }
            rss += (y[i] - fit).powi(2);
        }
        let l1: f64 = beta.iter().map(|b| b.abs()).sum();
        let oracle = rss / 8.0 + 0.37 * l1;
        assert_close!(potential(&pb, &beta).unwrap(), oracle, 1e-13);
    }

    #[test]
    fn calibration_values() {
        // p = 1, delta = 1/e makes the log term exactly one.
        let lam = calibrate_lambda(1.0, 2, 1, (-1.0f64).exp()).unwrap();
        assert_close!(lam, 2.0, 1e-14);
        assert_eq!(calibrate_lambda(0.0, 10, 10, 0.1).unwrap(), 0.0);
        // 2 sqrt(0.02 log 4000), evaluated at high precision.
        assert_close!(
            calibrate_lambda(1.0, 100, 200, 0.05).unwrap(),
            0.814_569_807_449_406,
            1e-12
        );
        assert!(calibrate_lambda(1.0, 10, 10, 0.0).is_err());
        assert!(calibrate_lambda(1.0, 10, 10, 1.0).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut x = DMatrix::identity(2, 2);
        x[(0, 1)] = f64::NAN;
        assert!(matches!(
            RegressionProblem::new(x, DVector::zeros(2), tuning()),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            RegressionProblem::new(DMatrix::identity(3, 2), DVector::zeros(2), tuning()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn scaling_flag_and_rescale() {
        let x = DMatrix::from_column_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let pb = RegressionProblem::new(x, DVector::zeros(2), tuning()).unwrap();
        assert!(!pb.columns_scaled());
        let (scaled, f) = pb.rescaled();
        assert!(scaled.columns_scaled());
        assert_close!(max_column_energy(scaled.design()), 1.0, 1e-14);
        assert_close!(f[0], 2f64.sqrt() / 2.0, 1e-15);
    }

    #[test]
    fn bound_report_tolerance() {
        assert!(BoundReport::analytic("x", 1.0 + 1e-12, 1.0).passed);
        assert!(!BoundReport::analytic("x", 1.0 + 1e-8, 1.0).passed);
        let r = BoundReport::with_tolerance("x", 1.1, 1.0, 0.2);
        assert!(r.passed);
        assert_close!(r.slack, -0.1, 1e-15);
    }
}
