//! Brute-force integration of the pseudo-posterior for `p <= 3`.
//!
//! The density has kinks on the coordinate hyperplanes but is smooth inside
//! each orthant, so every axis is cut into panels at 0 (and at the mode). The
//! adaptive rule applies the trapezoid rule after the double-exponential
//! substitution `x = c + r tanh(pi/2 sinh t)` on each panel, which clusters
//! nodes at the panel ends and converges geometrically under step halving even
//! when the density is sharply peaked at a kink.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{EstimateMethod, EwaEstimate};
use crate::lasso::fit_lasso;
use crate::model::{RegressionProblem, Tuning};

pub const MAX_DIM: usize = 3;
/// Target change of the posterior mean between refinement levels.
pub const REFINEMENT_TOL: f64 = 1e-9;
/// Bounds are widened until the density on the box boundary is below this fraction of the peak.
const BOUNDARY_RATIO: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureRule {
    /// A single composite trapezoid pass at `points_per_axis`.
    Trapezoid,
    /// Tanh-sinh substituted trapezoid on panels, step halved until converged.
    AdaptiveRefinement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub bounds: Vec<(f64, f64)>,
    pub points_per_axis: usize,
    pub rule: QuadratureRule,
}

impl QuadratureGrid {
    /// Box around the lasso fit reaching, along each axis, the point where the
    /// density has dropped below `1e-17` of its peak, then widened until the
    /// density on the whole boundary is negligible.
    pub fn auto(problem: &RegressionProblem) -> Result<Self> {
        check_dim(problem)?;
        let ctx = Context::new(problem)?;
        let bounds = (0..ctx.p)
            .map(|k| {
                (
                    ctx.mode[k] - ctx.line_extent(k, -1.0),
                    ctx.mode[k] + ctx.line_extent(k, 1.0),
                )
            })
            .collect();
        let mut grid = Self {
            bounds,
            points_per_axis: 65,
            rule: QuadratureRule::AdaptiveRefinement,
        };
        ctx.widen(&mut grid)?;
        Ok(grid)
    }

    fn validate(&self, p: usize) -> Result<()> {
        if self.bounds.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "grid has {} axes, problem has {p}",
                self.bounds.len()
            )));
        }
        if self.points_per_axis < 64 {
            return Err(Error::InvalidParameter(format!(
                "points_per_axis must be >= 64, got {}",
                self.points_per_axis
            )));
        }
        if self
            .bounds
            .iter()
            .any(|&(a, b)| !(a.is_finite() && b.is_finite() && a < b))
        {
            return Err(Error::InvalidParameter(
                "grid bounds must be finite with lo < hi".into(),
            ));
        }
        Ok(())
    }
}

/// Everything the oracle integrates in one pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub estimate: EwaEstimate,
    /// `log int exp(-V_n / tau)`.
    pub log_normaliser: f64,
    /// `int V_n dpi`.
    pub expected_potential: f64,
    /// `int G dpi` with `G(u) = (1/n)||X u||^2 + lambda ||u||_1`.
    pub expected_peakedness: f64,
    /// `(1/n) int ||X(u - mean)||^2 dpi`.
    pub prediction_variance: f64,
    /// Nodes per axis at the finest level used.
    pub intervals: usize,
    pub grid: QuadratureGrid,
}

fn check_dim(problem: &RegressionProblem) -> Result<()> {
    if problem.p() > MAX_DIM {
        return Err(Error::InvalidParameter(format!(
            "quadrature supports p <= {MAX_DIM}, got p = {}",
            problem.p()
        )));
    }
    Ok(())
}

/// Precomputed quadratic form of `V_n`.
struct Context {
    p: usize,
    gram: DMatrix<f64>,
    corr: DVector<f64>,
    offset: f64,
    lambda: f64,
    tau: f64,
    mode: DVector<f64>,
    v_min: f64,
}

impl Context {
    fn new(problem: &RegressionProblem) -> Result<Self> {
        let fit = fit_lasso(problem, 1e-14, 1_000_000)?;
        let mut ctx = Self {
            p: problem.p(),
            gram: problem.gram(),
            corr: problem.correlation(),
            offset: problem.response().norm_squared() / (2.0 * problem.n() as f64),
            lambda: problem.lambda(),
            tau: problem.tau(),
            mode: fit.coefficients,
            v_min: 0.0,
        };
        ctx.v_min = ctx.potential(ctx.mode.as_slice());
        Ok(ctx)
    }

    #[inline]
    fn potential(&self, u: &[f64]) -> f64 {
        let mut quad = 0.0;
        let mut lin = 0.0;
        let mut l1 = 0.0;
        for i in 0..self.p {
            lin += self.corr[i] * u[i];
            l1 += u[i].abs();
            let mut row = 0.0;
            for j in 0..self.p {
                row += self.gram[(i, j)] * u[j];
            }
            quad += u[i] * row;
        }
        self.offset - lin + 0.5 * quad + self.lambda * l1
    }

    #[inline]
    fn density(&self, u: &[f64]) -> f64 {
        (-(self.potential(u) - self.v_min) / self.tau).exp()
    }

    /// Distance from the mode along `sign * e_k` at which the log density
    /// has dropped by 40.
    fn line_extent(&self, k: usize, sign: f64) -> f64 {
        let mut u: Vec<f64> = self.mode.iter().copied().collect();
        let mut t = 1e-10 * (1.0 + self.mode[k].abs());
        for _ in 0..200 {
            u[k] = self.mode[k] + sign * t;
            if (self.potential(&u) - self.v_min) / self.tau >= 40.0 {
                break;
            }
            t *= 2.0;
        }
        t
    }

    /// Largest density on the box faces, probed on a lattice per face.
    fn boundary_max(&self, bounds: &[(f64, f64)]) -> f64 {
        let m: usize = if self.p == 3 { 65 } else { 257 };
        let p = self.p;
        let mut worst: f64 = 0.0;
        let mut u = vec![0.0; p];
        for axis in 0..p {
            for side in [bounds[axis].0, bounds[axis].1] {
                let others: Vec<usize> = (0..p).filter(|&k| k != axis).collect();
                let count = m.pow(others.len() as u32);
                for idx in 0..count {
                    let mut rest = idx;
                    for &k in &others {
                        let i = rest % m;
                        rest /= m;
                        let (a, b) = bounds[k];
                        u[k] = a + (b - a) * i as f64 / (m - 1) as f64;
                    }
                    u[axis] = side;
                    worst = worst.max(self.density(&u));
                }
            }
        }
        worst
    }

    fn widen(&self, grid: &mut QuadratureGrid) -> Result<()> {
        // peak density is 1 by construction (v_min at the mode)
        for _ in 0..40 {
            if self.boundary_max(&grid.bounds) < BOUNDARY_RATIO {
                return Ok(());
            }
            for (k, b) in grid.bounds.iter_mut().enumerate() {
                let c = self.mode[k].clamp(b.0, b.1);
                *b = (c - 2.0 * (c - b.0), c + 2.0 * (b.1 - c));
            }
        }
        Err(Error::NotConverged(
            "quadrature bounds did not reach negligible boundary density".into(),
        ))
    }

    /// Accumulator layout: `[1, u_1..u_p, u_i u_j (i <= j), ||u||_1, f]`.
    fn n_acc(&self) -> usize {
        2 + self.p + self.p * (self.p + 1) / 2 + 1
    }

    fn integrate(&self, axes: &[Axis], f: Option<&(dyn Fn(&[f64]) -> f64 + Sync)>) -> Vec<f64> {
        let n_acc = self.n_acc();
        let p = self.p;
        let first = &axes[0];
        let slice = |i0: usize| -> Vec<f64> {
            let mut acc = vec![0.0; n_acc];
            let mut u = vec![0.0; p];
            u[0] = first.nodes[i0];
            let rest: usize = axes[1..].iter().map(|a| a.nodes.len()).product();
            for idx in 0..rest {
                let mut r = idx;
                let mut w = first.weights[i0];
                for a in &axes[1..] {
                    let k = r % a.nodes.len();
                    r /= a.nodes.len();
                    w *= a.weights[k];
                }
                let mut r = idx;
                for (d, a) in axes.iter().enumerate().skip(1) {
                    let k = r % a.nodes.len();
                    r /= a.nodes.len();
                    u[d] = a.nodes[k];
                }
                let dens = w * self.density(&u);
                if dens == 0.0 {
                    continue;
                }
                acc[0] += dens;
                let mut slot = 1;
                for i in 0..p {
                    acc[slot] += dens * u[i];
                    slot += 1;
                }
                for i in 0..p {
                    for j in i..p {
                        acc[slot] += dens * u[i] * u[j];
                        slot += 1;
                    }
                }
                acc[slot] += dens * u.iter().map(|v| v.abs()).sum::<f64>();
                if let Some(f) = f {
                    acc[slot + 1] += dens * f(&u);
                }
            }
            acc
        };
        #[cfg(feature = "parallel")]
        let parts: Vec<Vec<f64>> = {
            use rayon::prelude::*;
            (0..first.nodes.len()).into_par_iter().map(slice).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let parts: Vec<Vec<f64>> = (0..first.nodes.len()).map(slice).collect();
        let mut total = vec![0.0; n_acc];
        for part in parts {
            for (t, v) in total.iter_mut().zip(part) {
                *t += v;
            }
        }
        total
    }
}

/// Quadrature nodes and weights along one axis.
struct Axis {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

/// Substituted-variable range; beyond it the tanh-sinh weights are below 1e-12.
const TANH_SINH_T_MAX: f64 = 3.2;

impl Axis {
    /// Composite trapezoid with `intervals` intervals, split at 0 when it is interior.
    fn trapezoid(lo: f64, hi: f64, intervals: usize) -> Self {
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut panel = |a: f64, b: f64, skip_first: bool| {
            let h = (b - a) / intervals as f64;
            for i in 0..=intervals {
                let w = if i == 0 || i == intervals { 0.5 * h } else { h };
                if i == 0 && skip_first {
                    *weights.last_mut().expect("previous panel") += w;
                    continue;
                }
                nodes.push(if i == intervals { b } else { a + h * i as f64 });
                weights.push(w);
            }
        };
        if lo < 0.0 && hi > 0.0 {
            panel(lo, 0.0, false);
            panel(0.0, hi, true);
        } else {
            panel(lo, hi, false);
        }
        Self { nodes, weights }
    }

    /// Tanh-sinh rule with step `h` on each panel between consecutive `breaks`.
    fn tanh_sinh(breaks: &[f64], h: f64) -> Self {
        let half = (TANH_SINH_T_MAX / h).ceil() as i64;
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for w in breaks.windows(2) {
            let (c, r) = (0.5 * (w[0] + w[1]), 0.5 * (w[1] - w[0]));
            for k in -half..=half {
                let t = k as f64 * h;
                let s = std::f64::consts::FRAC_PI_2 * t.sinh();
                let x = c + r * s.tanh();
                let weight = r * h * std::f64::consts::FRAC_PI_2 * t.cosh() / s.cosh().powi(2);
                if weight > 0.0 && x > w[0] && x < w[1] {
                    nodes.push(x);
                    weights.push(weight);
                }
            }
        }
        Self { nodes, weights }
    }
}

/// Panel breaks of one axis: the box ends, 0, the mode and points a few
/// conditional standard deviations `scale` either side of it, when interior.
fn panel_breaks(lo: f64, hi: f64, mode: f64, scale: f64) -> Vec<f64> {
    let gap = 1e-9 * (hi - lo);
    let mut breaks = vec![lo, hi];
    for cut in [
        0.0,
        mode,
        mode - 6.0 * scale,
        mode - 2.0 * scale,
        mode + 2.0 * scale,
        mode + 6.0 * scale,
    ] {
        if cut > lo + gap && cut < hi - gap && breaks.iter().all(|b| (b - cut).abs() > gap) {
            breaks.push(cut);
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks
}

struct Integrals {
    acc: Vec<f64>,
    intervals: usize,
}

fn romberg(ctx: &Context, grid: &QuadratureGrid, f: Option<&(dyn Fn(&[f64]) -> f64 + Sync)>) -> Result<Integrals> {
    let p = ctx.p;
    if grid.rule == QuadratureRule::Trapezoid {
        let intervals = (grid.points_per_axis - 1).div_ceil(2);
        let axes: Vec<Axis> = grid
            .bounds
            .iter()
            .map(|&(a, b)| Axis::trapezoid(a, b, intervals))
            .collect();
        return Ok(Integrals {
            acc: ctx.integrate(&axes, f),
            intervals: axes[0].nodes.len(),
        });
    }
    // finest step keeps the point count near 1e8
    let min_step = match p {
        1 => 1.0 / 4096.0,
        2 => 1.0 / 256.0,
        _ => 1.0 / 32.0,
    };
    let breaks: Vec<Vec<f64>> = (0..p)
        .map(|k| {
            let scale = (ctx.tau / ctx.gram[(k, k)].max(f64::MIN_POSITIVE)).sqrt();
            panel_breaks(grid.bounds[k].0, grid.bounds[k].1, ctx.mode[k], scale)
        })
        .collect();
    let normalised_mean = |acc: &[f64]| -> Vec<f64> { (1..=p).map(|i| acc[i] / acc[0]).collect() };
    // Once in its asymptotic regime the double-exponential rule roughly doubles
    // its correct digits per halving, so a small change that has also dropped
    // by two orders of magnitude leaves an error far below the change itself.
    let mut h = 0.5;
    let mut previous: Option<(Vec<f64>, f64)> = None;
    let mut last_change = f64::INFINITY;
    loop {
        let axes: Vec<Axis> = breaks.iter().map(|b| Axis::tanh_sinh(b, h)).collect();
        let acc = ctx.integrate(&axes, f);
        let mean = normalised_mean(&acc);
        if let Some((prev, mass)) = &previous {
            let mean_change = mean.iter().zip(prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let change = mean_change.max((acc[0] / mass - 1.0).abs());
            let doubling = change <= 1e-6 && change <= 1e-2 * last_change;
            if change <= REFINEMENT_TOL || doubling {
                return Ok(Integrals {
                    acc,
                    intervals: axes.iter().map(|a| a.nodes.len()).max().unwrap_or(0),
                });
            }
            last_change = change;
        }
        if h * 0.5 < min_step {
            return Err(Error::NotConverged(format!(
                "quadrature refinement did not settle at step {h} ({} nodes per axis)",
                axes[0].nodes.len()
            )));
        }
        previous = Some((mean, acc[0]));
        h *= 0.5;
    }
}

fn prepare(problem: &RegressionProblem, grid: &QuadratureGrid) -> Result<(Context, QuadratureGrid)> {
    check_dim(problem)?;
    grid.validate(problem.p())?;
    let ctx = Context::new(problem)?;
    let mut grid = grid.clone();
    ctx.widen(&mut grid)?;
    Ok((ctx, grid))
}

/// Posterior moments, normalising constant and derived integrals.
pub fn oracle_integrals(problem: &RegressionProblem, grid: &QuadratureGrid) -> Result<OracleResult> {
    let (ctx, grid) = prepare(problem, grid)?;
    let Integrals { acc, intervals } = romberg(&ctx, &grid, None)?;
    let p = ctx.p;
    let z = acc[0];
    let mean = DVector::from_fn(p, |i, _| acc[1 + i] / z);
    let mut second = DMatrix::zeros(p, p);
    let mut slot = 1 + p;
    for i in 0..p {
        for j in i..p {
            second[(i, j)] = acc[slot] / z;
            second[(j, i)] = acc[slot] / z;
            slot += 1;
        }
    }
    let e_l1 = acc[slot] / z;
    let cov = &second - &mean * mean.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    // E u^T S u = tr(S E[u u^T])
    let e_quad = (&ctx.gram * &second).trace();
    let expected_potential = ctx.offset - ctx.corr.dot(&mean) + 0.5 * e_quad + ctx.lambda * e_l1;
    let expected_peakedness = e_quad + ctx.lambda * e_l1;
    let g_mean = mean.dot(&(&ctx.gram * &mean)) + ctx.lambda * mean.iter().map(|v| v.abs()).sum::<f64>();
    let h = p as f64 * ctx.tau - expected_peakedness + g_mean;
    let prediction_variance = (&ctx.gram * &cov).trace();
    Ok(OracleResult {
        estimate: EwaEstimate::exact(mean, cov, Some(h), EstimateMethod::Quadrature),
        log_normaliser: z.ln() - ctx.v_min / ctx.tau,
        expected_potential,
        expected_peakedness,
        prediction_variance,
        intervals,
        grid,
    })
}

/// Posterior mean, covariance and `H(tau)` by direct integration.
pub fn oracle_moments(problem: &RegressionProblem, grid: &QuadratureGrid) -> Result<EwaEstimate> {
    Ok(oracle_integrals(problem, grid)?.estimate)
}

/// `int f dpi` for an arbitrary integrand over coefficient space.
pub fn oracle_functional<F>(problem: &RegressionProblem, grid: &QuadratureGrid, f: F) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let (ctx, grid) = prepare(problem, grid)?;
    let probe = vec![0.0; ctx.p];
    if !f(&probe).is_finite() {
        return Err(Error::NonFinite("integrand".into()));
    }
    let acc = romberg(&ctx, &grid, Some(&f))?.acc;
    let value = acc[acc.len() - 1] / acc[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("integrand".into()));
    }
    Ok(value)
}

/// Mean and variance of one coordinate of an orthonormal design, whose
/// posterior factor is `exp(-((u - b)^2 / 2 + lambda |u|) / tau)`.
pub fn oracle_coordinate(tau: f64, lambda: f64, b: f64) -> Result<(f64, f64)> {
    let pb = RegressionProblem::new(
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_element(1, b),
        Tuning::new(1.0, lambda, tau)?,
    )?;
    let est = oracle_moments(&pb, &QuadratureGrid::auto(&pb)?)?;
    Ok((est.mean[0], est.covariance[(0, 0)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orthonormal::{coordinate_moments, ewa_closed_form, ShrinkageInputs};

    fn problem(x: DMatrix<f64>, y: Vec<f64>, lambda: f64, tau: f64) -> RegressionProblem {
        RegressionProblem::new(x, DVector::from_vec(y), Tuning::new(1.0, lambda, tau).unwrap()).unwrap()
    }

    #[test]
    fn one_dimensional_matches_closed_form() {
        for (tau, lambda, b) in [(0.3, 1.0, 1.2), (0.05, 0.5, -0.3), (1.0, 0.2, 3.0), (0.2, 1.0, 0.0)] {
            let (m, v) = oracle_coordinate(tau, lambda, b).unwrap();
            let (cm, cv) = coordinate_moments(tau, lambda, b);
            assert_close!(m, cm, 1e-8);
            assert_close!(v, cv, 1e-8);
        }
    }

    #[test]
    fn two_dimensional_orthonormal() {
        let s = 2f64.sqrt();
        let x = DMatrix::identity(2, 2) * s;
        let pb = problem(x, vec![1.5 * s, -0.2 * s], 0.6, 0.25);
        let grid = QuadratureGrid::auto(&pb).unwrap();
        let res = oracle_integrals(&pb, &grid).unwrap();
        let exact = ewa_closed_form(&ShrinkageInputs::from_problem(&pb).unwrap());
        for j in 0..2 {
            assert_close!(res.estimate.mean[j], exact.mean[j], 1e-8);
            assert_close!(res.estimate.covariance[(j, j)], exact.covariance[(j, j)], 1e-8);
        }
        assert_close!(res.estimate.covariance[(0, 1)], 0.0, 1e-9);
        assert_close!(res.estimate.h_value.unwrap(), exact.h_value.unwrap(), 1e-8);
    }

    #[test]
    fn normalisation_and_symmetry() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.3, -0.5, 1.2, 0.8, 0.1]);
        let pb = problem(x.clone(), vec![0.4, 1.0, -0.7], 0.3, 0.2);
        let grid = QuadratureGrid::auto(&pb).unwrap();
        assert_close!(oracle_functional(&pb, &grid, |_| 1.0).unwrap(), 1.0, 1e-12);
        let m = oracle_moments(&pb, &grid).unwrap().mean;

        let flipped = problem(x, vec![-0.4, -1.0, 0.7], 0.3, 0.2);
        let fgrid = QuadratureGrid {
            bounds: grid.bounds.iter().map(|&(a, b)| (-b, -a)).collect(),
            ..grid.clone()
        };
        let fm = oracle_moments(&flipped, &fgrid).unwrap().mean;
        assert_close!(fm[0], -m[0], 1e-12);
        assert_close!(fm[1], -m[1], 1e-12);
    }

    #[test]
    fn huge_lambda_collapses_to_zero() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        let pb = problem(x, vec![0.5, -0.5], 1e3, 0.1);
        let est = oracle_moments(&pb, &QuadratureGrid::auto(&pb).unwrap()).unwrap();
        assert!(est.mean.amax() < 1e-6);
    }

    #[test]
    fn analytic_inequalities_hold() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.9, 0.5, 0.4, -1.0, -0.8, 0.2, 0.3]);
        let pb = problem(x, vec![1.0, 0.2, -0.9, 0.5], 0.2, 0.3);
        let grid = QuadratureGrid::auto(&pb).unwrap();
        let res = oracle_integrals(&pb, &grid).unwrap();
        let h = res.estimate.h_value.unwrap();
        assert!(h >= -1e-10 && h <= 2.0 * 0.3 + 1e-10);
        assert!(res.prediction_variance <= 2.0 * 0.3 + 1e-10);
        // probe beta = 0: E V <= p tau + V(0) - (1/2n) E||X u||^2
        let v0 = crate::model::potential(&pb, &DVector::zeros(2)).unwrap();
        let gram = pb.gram();
        let e_xu = oracle_functional(&pb, &grid, |u| {
            let v = DVector::from_column_slice(u);
            v.dot(&(&gram * &v))
        })
        .unwrap();
        assert!(res.expected_potential <= 2.0 * 0.3 + v0 - 0.5 * e_xu + 1e-10);
    }

    #[test]
    fn rejects_large_p_and_coarse_grid() {
        let pb = problem(DMatrix::identity(4, 4), vec![1.0; 4], 0.1, 0.1);
        assert!(QuadratureGrid::auto(&pb).is_err());
        let pb = problem(DMatrix::identity(1, 1), vec![1.0], 0.1, 0.1);
        let grid = QuadratureGrid {
            bounds: vec![(-1.0, 1.0)],
            points_per_axis: 10,
            rule: QuadratureRule::Trapezoid,
        };
        assert!(oracle_moments(&pb, &grid).is_err());
    }
}
