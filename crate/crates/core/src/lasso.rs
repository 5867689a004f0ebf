//! Lasso by cyclic coordinate descent, stopped on the duality gap, plus its
//! Stein unbiased risk estimate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l1_norm, least_squares_pinv, numerical_rank, soft_threshold};
use crate::model::RegressionProblem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub coefficients: DVector<f64>,
    pub active_set: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub duality_gap: f64,
}

/// Minimises `(1/2n)||y - X b||^2 + lambda ||b||_1`.
///
/// Non-convergence is not an error: the last iterate is returned with
/// `converged = false`.
pub fn fit_lasso(problem: &RegressionProblem, tol: f64, max_iter: usize) -> Result<LassoFit> {
    fit_lasso_from(problem, None, tol, max_iter)
}

/// As [`fit_lasso`], warm-started from `init`.
pub fn fit_lasso_from(
    problem: &RegressionProblem,
    init: Option<&DVector<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<LassoFit> {
    if max_iter == 0 {
        return Err(Error::InvalidParameter("max_iter must be >= 1".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be > 0, got {tol}")));
    }
    let p = problem.p();
    let lambda = problem.lambda();
    let gram = problem.gram();
    let corr = problem.correlation();

    let mut beta = match init {
        Some(b) => {
            problem.check_len(b)?;
            b.clone()
        }
        None => DVector::zeros(p),
    };
    // cached G beta
    let mut gbeta = &gram * &beta;

    let mut gap = duality_gap(problem, &beta);
    let mut iterations = 0;
    while gap > tol && iterations < max_iter {
        iterations += 1;
        for j in 0..p {
            let gjj = gram[(j, j)];
            let old = beta[j];
            let new = if gjj > 0.0 {
                let rho = corr[j] - (gbeta[j] - gjj * old);
                soft_threshold(rho, lambda) / gjj
            } else {
                0.0
            };
            if new != old {
                let delta = new - old;
                gbeta.axpy(delta, &gram.column(j), 1.0);
                beta[j] = new;
            }
        }
        gap = duality_gap(problem, &beta);
    }
    let active_set = (0..p).filter(|&j| beta[j] != 0.0).collect();
    Ok(LassoFit {
        coefficients: beta,
        active_set,
        iterations,
        converged: gap <= tol,
        duality_gap: gap,
    })
}

/// Primal minus dual objective at `beta`, using the rescaled residual as dual point.
///
/// With `lambda = 0` the dual point is the residual projected onto the
/// orthogonal complement of the column space.
pub fn duality_gap(problem: &RegressionProblem, beta: &DVector<f64>) -> f64 {
    let n = problem.n() as f64;
    let lambda = problem.lambda();
    let y = problem.response();
    let resid = y - problem.design() * beta;
    let primal = resid.norm_squared() / (2.0 * n) + lambda * l1_norm(beta);
    let theta = if lambda == 0.0 {
        let fitted = problem.design() * least_squares_pinv(problem.design(), &resid);
        &resid - fitted
    } else {
        let xtr = problem.design().tr_mul(&resid).amax();
        let scale = if xtr <= n * lambda { 1.0 } else { n * lambda / xtr };
        resid * scale
    };
    let dual = (y.norm_squared() - (y - theta).norm_squared()) / (2.0 * n);
    (primal - dual).max(0.0)
}

/// Largest absolute KKT violation `max_j |(1/n) x_j^T r| - lambda` off the
/// active set, and `|(1/n) x_j^T r - lambda sign(b_j)|` on it.
pub fn kkt_violation(problem: &RegressionProblem, beta: &DVector<f64>) -> f64 {
    let n = problem.n() as f64;
    let lambda = problem.lambda();
    let resid = problem.response() - problem.design() * beta;
    let grad = problem.design().tr_mul(&resid) / n;
    grad.iter()
        .zip(beta.iter())
        .map(|(&g, &b)| {
            if b == 0.0 {
                (g.abs() - lambda).max(0.0)
            } else {
                (g - lambda * b.signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Stein unbiased risk estimate of the lasso:
/// `(1/n)||y - X b||^2 - sigma^2 + (2 sigma^2 / n) rank(X_A)`.
pub fn lasso_sure(problem: &RegressionProblem, fit: &LassoFit) -> Result<f64> {
    problem.check_len(&fit.coefficients)?;
    let n = problem.n() as f64;
    let sigma2 = problem.sigma().powi(2);
    let resid = problem.response() - problem.design() * &fit.coefficients;
    let rank = active_rank(problem.design(), &fit.active_set);
    Ok(resid.norm_squared() / n - sigma2 + 2.0 * sigma2 / n * rank as f64)
}

/// `rank(X_A)` with the shared relative cutoff.
pub fn active_rank(design: &DMatrix<f64>, active: &[usize]) -> usize {
    if active.is_empty() {
        return 0;
    }
    numerical_rank(&design.select_columns(active))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{potential, Tuning};

    fn problem(x: DMatrix<f64>, y: Vec<f64>, lambda: f64) -> RegressionProblem {
        RegressionProblem::new(x, DVector::from_vec(y), Tuning::new(1.0, lambda, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn unpenalised_square_is_inverse() {
        let x = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 3.0]);
        let pb = problem(x.clone(), vec![1.0, 2.0], 0.0);
        let fit = fit_lasso(&pb, 1e-14, 100_000).unwrap();
        let want = x.try_inverse().unwrap() * pb.response();
        assert!(fit.converged);
        assert!((fit.coefficients - want).amax() < 1e-6);
    }

    #[test]
    fn orthonormal_is_soft_threshold() {
        // X = sqrt(2) I makes X^T X / n = I with n = 2; z = X^T y / n.
        let s = 2f64.sqrt();
        let x = DMatrix::from_diagonal(&DVector::from_vec(vec![s, s]));
        // z = (2, 0.5)  =>  y = n z / s
        let pb = problem(x, vec![2.0 * 2.0 / s, 2.0 * 0.5 / s], 1.0);
        let fit = fit_lasso(&pb, 1e-14, 1000).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-12);
        assert_eq!(fit.coefficients[1], 0.0);
        assert_eq!(fit.active_set, vec![0]);

        // grid search of V_n around the fit
        let v0 = potential(&pb, &fit.coefficients).unwrap();
        for a in -20..=20 {
            for b in -20..=20 {
                let probe = DVector::from_vec(vec![1.0 + a as f64 * 0.01, b as f64 * 0.01]);
                assert!(potential(&pb, &probe).unwrap() >= v0 - 1e-14);
            }
        }
    }

    #[test]
    fn large_lambda_gives_zero() {
        let x = DMatrix::from_fn(6, 3, |i, j| ((i + 2 * j) as f64).cos());
        let y = vec![1.0, -0.5, 0.3, 0.8, -1.2, 0.1];
        let pb0 = problem(x.clone(), y.clone(), 1.0);
        let lmax = pb0.correlation().amax();
        let pb = problem(x, y, lmax);
        let fit = fit_lasso(&pb, 1e-12, 100).unwrap();
        assert!(fit.coefficients.iter().all(|&b| b == 0.0));
        assert!(fit.active_set.is_empty());
    }

    #[test]
    fn sure_degenerate_cases() {
        let pb = problem(DMatrix::identity(3, 3), vec![0.0; 3], 1.0);
        let fit = fit_lasso(&pb, 1e-12, 100).unwrap();
        assert!((lasso_sure(&pb, &fit).unwrap() + 1.0).abs() < 1e-15);

        let pb = problem(DMatrix::identity(3, 3), vec![1.0, -2.0, 0.5], 1e6);
        let fit = fit_lasso(&pb, 1e-12, 100).unwrap();
        let want = (1.0 + 4.0 + 0.25) / 3.0 - 1.0;
        assert!((lasso_sure(&pb, &fit).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn zero_column_stays_zero() {
        let mut x = DMatrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64 * 0.1 + 0.3);
        x.column_mut(1).fill(0.0);
        let pb = problem(x, vec![1.0, 0.0, -1.0, 2.0, 0.5], 0.01);
        let fit = fit_lasso(&pb, 1e-12, 100_000).unwrap();
        assert_eq!(fit.coefficients[1], 0.0);
        assert!(fit.converged);
    }

    #[test]
    fn max_iter_zero_rejected() {
        let pb = problem(DMatrix::identity(2, 2), vec![1.0, 1.0], 0.1);
        assert!(fit_lasso(&pb, 1e-8, 0).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn kkt_and_optimality(
                vals in proptest::collection::vec(-2.0f64..2.0, 80),
                lam_frac in 0.05f64..0.9,
                probes in proptest::collection::vec(-1.0f64..1.0, 400),
            ) {
                let (n, p) = (10, 4);
                let x = DMatrix::from_fn(n, p, |i, j| vals[i * p + j]);
                let y = DVector::from_fn(n, |i, _| vals[40 + i] + vals[60 + i]);
                let base = RegressionProblem::new(x, y, Tuning::new(1.0, 1.0, 1.0).unwrap()).unwrap();
                let lam = lam_frac * base.correlation().amax();
                let pb = base.with_tuning(Tuning::new(1.0, lam, 1.0).unwrap()).unwrap();
                let tol = 1e-12;
                let fit = fit_lasso(&pb, tol, 200_000).unwrap();
                prop_assert!(fit.converged);
                prop_assert!(fit.duality_gap <= tol);
                prop_assert!(kkt_violation(&pb, &fit.coefficients) <= 1e-5);
                let v = potential(&pb, &fit.coefficients).unwrap();
                for k in 0..100 {
                    let probe = DVector::from_fn(p, |j, _| fit.coefficients[j] + probes[(4 * k + j) % 400]);
                    prop_assert!(v <= potential(&pb, &probe).unwrap() + tol);
                }
            }
        }
    }
}
