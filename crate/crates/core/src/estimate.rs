use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateMethod {
    ClosedForm,
    Quadrature,
    Sampler,
}

/// Pseudo-posterior mean with its covariance and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwaEstimate {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// `H(tau)`, when the producing route computes it.
    pub h_value: Option<f64>,
    pub method: EstimateMethod,
    /// Per-coordinate Monte Carlo standard error of `mean` (zero for exact routes).
    pub mc_std_error: DVector<f64>,
}

impl EwaEstimate {
    pub fn exact(mean: DVector<f64>, covariance: DMatrix<f64>, h_value: Option<f64>, method: EstimateMethod) -> Self {
        let p = mean.len();
        Self {
            mean,
            covariance,
            h_value,
            method,
            mc_std_error: DVector::zeros(p),
        }
    }

    pub fn p(&self) -> usize {
        self.mean.len()
    }
}
