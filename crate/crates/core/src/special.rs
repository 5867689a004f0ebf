//! Scaled complementary error function and the Gaussian Mills ratio.
//!
//! `psi(v, t) = exp(t^2 / 2v) * P(N(0, v) > t)`. The defining expression
//! overflows long before the quantity itself does, so everything here is
//! built on `erfcx(x) = exp(x^2) erfc(x)`:
//!
//! * `0 <= x < 1.5`: the positive-term series
//!   `erf(x) = 2/sqrt(pi) e^{-x^2} sum_k 2^k x^{2k+1} / (2k+1)!!`;
//! * `x >= 1.5`: the Laplace continued fraction
//!   `erfcx(x) = 1/sqrt(pi) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))`;
//! * `x < 0`: the reflection `erfcx(-x) = 2 e^{x^2} - erfcx(x)`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

const SERIES_CUTOFF: f64 = 1.5;
const CF_TERMS: usize = 120;

/// `exp(x^2) * erfc(x)` for `x >= 0`.
fn erfcx_nonneg(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < SERIES_CUTOFF {
        let x2 = x * x;
        let mut sum = 0.0;
        let mut term = x;
        let mut k = 0u32;
        while term > 1e-17 * sum || k == 0 {
            sum += term;
            k += 1;
            term *= 2.0 * x2 / f64::from(2 * k + 1);
        }
        let erf = 2.0 / PI.sqrt() * (-x2).exp() * sum;
        x2.exp() * (1.0 - erf)
    } else {
        let mut t = x;
        for k in (1..=CF_TERMS).rev() {
            t = x + (k as f64 * 0.5) / t;
        }
        1.0 / (PI.sqrt() * t)
    }
}

/// Scaled complementary error function `exp(x^2) erfc(x)`.
///
/// Fails when the result is not representable (`x` below about `-26.6`).
pub fn erfcx(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::InvalidParameter("erfcx of NaN".into()));
    }
    if x >= 0.0 {
        return Ok(erfcx_nonneg(x));
    }
    let value = 2.0 * (x * x).exp() - erfcx_nonneg(-x);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Overflow(format!("erfcx({x}) is not representable")))
    }
}

/// `ln erfcx(x)`, finite for every finite `x`.
pub fn ln_erfcx(x: f64) -> f64 {
    if x >= 0.0 {
        erfcx_nonneg(x).ln()
    } else {
        // erfcx(x) = e^{x^2} (2 - erfc(-x)) and erfc(-x) = e^{-x^2} erfcx(-x)
        let x2 = x * x;
        x2 + (2.0 - (-x2).exp() * erfcx_nonneg(-x)).ln()
    }
}

/// `psi(v, t) = e^{t^2/2v} (2 pi v)^{-1/2} int_t^inf e^{-u^2/2v} du`.
pub fn psi(v: f64, t: f64) -> Result<f64> {
    check_variance(v)?;
    let z = t / v.sqrt();
    erfcx(z * FRAC_1_SQRT_2)
        .map(|e| 0.5 * e)
        .map_err(|_| Error::Overflow(format!("psi overflows at t/sqrt(v) = {z}")))
}

/// `ln psi(v, t)`.
pub fn ln_psi(v: f64, t: f64) -> Result<f64> {
    check_variance(v)?;
    Ok(ln_psi_unit(t / v.sqrt()))
}

/// `ln psi(1, z)`.
pub(crate) fn ln_psi_unit(z: f64) -> f64 {
    ln_erfcx(z * FRAC_1_SQRT_2) - std::f64::consts::LN_2
}

/// `psi(1, z)` for `z >= 0` (never overflows there).
pub(crate) fn psi_unit_nonneg(z: f64) -> f64 {
    debug_assert!(z >= 0.0);
    0.5 * erfcx_nonneg(z * FRAC_1_SQRT_2)
}

fn check_variance(v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("psi needs v > 0, got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Gauss-Legendre (5 point) integration of `f` on `[a, b]`.
    fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        const X: [f64; 5] = [
            0.0,
            -0.538_469_310_105_683_1,
            0.538_469_310_105_683_1,
            -0.906_179_845_938_664,
            0.906_179_845_938_664,
        ];
        const W: [f64; 5] = [
            0.568_888_888_888_888_9,
            0.478_628_670_499_366_5,
            0.478_628_670_499_366_5,
            0.236_926_885_056_189_08,
            0.236_926_885_056_189_08,
        ];
        let h = (b - a) / panels as f64;
        let mut total = 0.0;
        for k in 0..panels {
            let mid = a + (k as f64 + 0.5) * h;
            for (x, w) in X.iter().zip(W) {
                total += w * f(mid + 0.5 * h * x);
            }
        }
        total * 0.5 * h
    }

    /// Defining integral, written as `int_0^inf exp(-s t - s^2/2) ds / sqrt(2 pi)`
    /// after substituting `u = t + s`, which keeps the integrand bounded.
    fn psi_by_quadrature(t: f64) -> f64 {
        let upper = 40.0;
        gauss_legendre(|s| (-s * t - 0.5 * s * s).exp(), 0.0, upper, 20_000) / (2.0 * PI).sqrt()
    }

    #[test]
    fn half_at_origin() {
        for v in [1e-6, 0.3, 1.0, 17.0] {
            assert!((psi(v, 0.0).unwrap() - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_defining_integral() {
        for t in [-3.0, -1.0, 0.0, 1.0, 3.0, 10.0] {
            let q = psi_by_quadrature(t);
            let p = psi(1.0, t).unwrap();
            assert!(((p - q) / q).abs() <= 1e-10, "t={t}: {p} vs {q}");
        }
    }

    #[test]
    fn mills_ratio_asymptotics() {
        let t: f64 = 30.0;
        let series = 1.0 / (t * (2.0 * PI).sqrt()) * (1.0 - 1.0 / t.powi(2) + 3.0 / t.powi(4));
        let p = psi(1.0, t).unwrap();
        assert!(((p - series) / series).abs() < 1e-6);
    }

    #[test]
    fn variance_scaling() {
        for (v, t) in [(0.25, 1.3), (4.0, -2.0), (1e-4, 0.05)] {
            let a = psi(v, t).unwrap();
            let b = psi(1.0, t / f64::sqrt(v)).unwrap();
            assert!(((a - b) / b).abs() < 1e-14);
        }
    }

    #[test]
    fn log_version_agrees_and_survives_overflow() {
        for t in [-20.0, -5.0, -0.3, 0.0, 2.0, 50.0] {
            let direct = psi(1.0, t).unwrap().ln();
            assert!((ln_psi(1.0, t).unwrap() - direct).abs() < 1e-12 * direct.abs().max(1.0));
        }
        assert!(psi(1.0, -60.0).is_err());
        let l = ln_psi(1.0, -60.0).unwrap();
        assert!((l - 1800.0).abs() < 1e-9);
        assert!(psi(0.0, 1.0).is_err());
    }

    #[test]
    fn branch_boundary_is_continuous() {
        let below = erfcx(SERIES_CUTOFF - 1e-12).unwrap();
        let above = erfcx(SERIES_CUTOFF).unwrap();
        assert!(((below - above) / above).abs() < 1e-12);
    }

    #[test]
    fn reference_values() {
        // mpmath at 40 digits
        let cases = [
            (0.5, 0.615_690_344_192_925_9),
            (1.0, 0.427_583_576_155_807_0),
            (2.0, 0.255_395_676_310_505_7),
            (5.0, 0.110_704_637_733_068_6),
            (-1.0, 5.008_980_080_762_283),
        ];
        for (x, want) in cases {
            let got = erfcx(x).unwrap();
            assert!(((got - want) / want).abs() < 2e-15, "erfcx({x}) = {got}");
        }
    }
}
