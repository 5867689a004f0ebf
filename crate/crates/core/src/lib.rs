//! Exponentially weighted aggregation (EWA) with the Laplace prior for sparse
//! linear regression, and its nuclear-norm analogue for trace regression.
//!
//! The pseudo-posterior `pi(beta) ∝ exp(-V_n(beta) / tau)` with
//! `V_n(beta) = (1/2n) ||y - X beta||^2 + lambda ||beta||_1` is handled by
//! three independent routes that check one another:
//!
//! * [`orthonormal`]: exact thresholding formulas when `X^T X / n = I`;
//! * [`quadrature`]: brute-force integration for `p <= 3`;
//! * [`sampler`]: Moreau-Yosida regularised Langevin sampling for general designs.
//!
//! [`experiment`] turns these into replicated checks of the risk and
//! concentration inequalities.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
    }};
}

pub mod compatibility;
pub mod error;
pub mod estimate;
pub mod experiment;
pub mod io;
pub mod lasso;
pub mod linalg;
pub mod model;
pub mod orthonormal;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod special;
pub mod stats;
pub mod trace;

pub use error::{Error, Result};
pub use estimate::{EstimateMethod, EwaEstimate};
pub use model::{BoundReport, CoefficientVector, RegressionProblem, Tuning};
