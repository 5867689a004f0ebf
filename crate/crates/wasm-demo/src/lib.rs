//! WebAssembly bindings for the closed-form (orthonormal design) routines.
//!
//! Every export returns a flat `Float64Array`; invalid inputs raise a JS error.

use ewa_core::orthonormal::{self, ShrinkageInputs};
use nalgebra::DVector;
use wasm_bindgen::prelude::*;

fn grid(hi: f64, points: usize) -> Result<Vec<f64>, String> {
    if !(points >= 2 && points <= 100_000) {
        return Err(format!("points must lie in [2, 100000], got {points}"));
    }
    Ok(orthonormal::linspace(0.0, hi, points))
}

/// Interleaved `[z, h(lambda_bar, z)]` pairs on `[0, 2 lambda_bar]`.
pub fn h_curve_pairs(lambda_bar: f64, points: usize) -> Result<Vec<f64>, String> {
    let z = grid(2.0 * lambda_bar.max(0.0), points)?;
    let h = orthonormal::h_curve(lambda_bar, &z).map_err(|e| e.to_string())?;
    Ok(z.iter().zip(&h).flat_map(|(&z, &h)| [z, h]).collect())
}

/// Interleaved `[b, ewa mean, soft threshold, posterior sd]` rows for `b` in `[0, b_max]`.
pub fn shrinkage_rows(tau: f64, lambda: f64, b_max: f64, points: usize) -> Result<Vec<f64>, String> {
    ShrinkageInputs::new(tau, lambda, DVector::zeros(1)).map_err(|e| e.to_string())?;
    if !(b_max > 0.0 && b_max.is_finite()) {
        return Err(format!("b_max must be > 0, got {b_max}"));
    }
    Ok(grid(b_max, points)?
        .into_iter()
        .flat_map(|b| {
            let (mean, var) = orthonormal::coordinate_moments(tau, lambda, b);
            [b, mean, (b - lambda).max(0.0), var.sqrt()]
        })
        .collect())
}

/// Interleaved `[tau, ||ewa(tau) - lasso||_2]` rows for least-squares coefficients
/// `ls`, with `tau` running geometrically from `tau_max` down to `tau_min`.
pub fn interpolation_rows(
    ls: &[f64],
    lambda: f64,
    tau_max: f64,
    tau_min: f64,
    points: usize,
) -> Result<Vec<f64>, String> {
    if ls.is_empty() {
        return Err("need at least one coefficient".into());
    }
    if !(tau_min > 0.0 && tau_max > tau_min && tau_max.is_finite()) {
        return Err(format!("need 0 < tau_min < tau_max, got {tau_min}, {tau_max}"));
    }
    let b = DVector::from_column_slice(ls);
    let lasso = b.map(|v| v.signum() * (v.abs() - lambda).max(0.0));
    let ratio = (tau_min / tau_max).ln();
    grid(1.0, points)?
        .into_iter()
        .map(|s| {
            let tau = tau_max * (ratio * s).exp();
            let inputs = ShrinkageInputs::new(tau, lambda, b.clone()).map_err(|e| e.to_string())?;
            let mean = orthonormal::ewa_closed_form(&inputs).mean;
            Ok([tau, (mean - &lasso).norm()])
        })
        .collect::<Result<Vec<_>, String>>()
        .map(|rows| rows.concat())
}

#[wasm_bindgen]
pub fn h_curve(lambda_bar: f64, points: usize) -> Result<Vec<f64>, JsError> {
    h_curve_pairs(lambda_bar, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn shrinkage(tau: f64, lambda: f64, b_max: f64, points: usize) -> Result<Vec<f64>, JsError> {
    shrinkage_rows(tau, lambda, b_max, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn interpolation_path(
    ls: &[f64],
    lambda: f64,
    tau_max: f64,
    tau_min: f64,
    points: usize,
) -> Result<Vec<f64>, JsError> {
    interpolation_rows(ls, lambda, tau_max, tau_min, points).map_err(|e| JsError::new(&e))
}
