//! Trace regression `y_i = <X_i, B*> + xi_i` with a nuclear-norm penalty:
//! penalised least squares, the matrix pseudo-posterior, `v_X`, and the
//! projectors onto the cone of dimensionality reduction.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::linalg::{
    nuclear_norm, operator_norm, singular_value_threshold, singular_values_sorted, sym_max_eigenvalue,
};
use crate::model::BoundReport;
use crate::sampler::{
    sample_target, target_concentration, target_h, target_variance_bound, LinearTarget, Penalty, SampleSet,
    SamplerConfig,
};

/// Largest `m1 * m2` accepted by the matrix sampler.
pub const MAX_SAMPLER_ENTRIES: usize = 400;
/// Relative singular-value cutoff used for ranks of matrix parameters.
pub const MATRIX_RANK_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceProblem {
    tensor: Vec<DMatrix<f64>>,
    response: DVector<f64>,
    sigma: f64,
    lambda: f64,
    tau: f64,
    design: DMatrix<f64>,
}

impl TraceProblem {
    pub fn new(tensor: Vec<DMatrix<f64>>, response: DVector<f64>, sigma: f64, lambda: f64, tau: f64) -> Result<Self> {
        let n = tensor.len();
        if n == 0 {
            return Err(Error::DimensionMismatch("empty design tensor".into()));
        }
        let (m1, m2) = tensor[0].shape();
        if m1 == 0 || m2 == 0 {
            return Err(Error::DimensionMismatch(format!("observation matrices are {m1}x{m2}")));
        }
        if let Some(i) = tensor.iter().position(|x| x.shape() != (m1, m2)) {
            return Err(Error::DimensionMismatch(format!(
                "X_{i} is {:?}, expected ({m1}, {m2})",
                tensor[i].shape()
            )));
        }
        ensure_dims("response length", n, response.len())?;
        if tensor.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("design tensor".into()));
        }
        if response.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response".into()));
        }
        crate::model::Tuning::new(sigma, lambda, tau)?;
        let design = DMatrix::from_fn(n, m1 * m2, |i, k| tensor[i].as_slice()[k]);
        Ok(Self {
            tensor,
            response,
            sigma,
            lambda,
            tau,
            design,
        })
    }

    pub fn tensor(&self) -> &[DMatrix<f64>] {
        &self.tensor
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.response
    }

    pub fn n(&self) -> usize {
        self.tensor.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tensor[0].shape()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Observations as rows of an `n x (m1 m2)` matrix (column-major vectorisation).
    pub fn vectorised_design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn with_tuning(&self, sigma: f64, lambda: f64, tau: f64) -> Result<Self> {
        crate::model::Tuning::new(sigma, lambda, tau)?;
        Ok(Self {
            sigma,
            lambda,
            tau,
            ..self.clone()
        })
    }

    pub fn with_response(&self, response: DVector<f64>) -> Result<Self> {
        Self::new(self.tensor.clone(), response, self.sigma, self.lambda, self.tau)
    }

    fn check_shape(&self, a: &DMatrix<f64>) -> Result<()> {
        if a.shape() != self.shape() {
            return Err(Error::DimensionMismatch(format!(
                "matrix is {:?}, expected {:?}",
                a.shape(),
                self.shape()
            )));
        }
        Ok(())
    }

    /// `(1/2n) sum (y_i - <X_i, B>)^2 + lambda ||B||_*`.
    pub fn potential(&self, b: &DMatrix<f64>) -> Result<f64> {
        self.check_shape(b)?;
        let r = &self.response - &self.design * vec_of(b);
        Ok(r.norm_squared() / (2.0 * self.n() as f64) + self.lambda * nuclear_norm(b))
    }
}

pub(crate) fn vec_of(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

pub fn unvec(v: &DVector<f64>, m1: usize, m2: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(m1, m2, v.as_slice())
}

/// On-disk form: `{shape: [n, m1, m2], tensor: [[[..]]], response, sigma, lambda, tau}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceDocument {
    pub shape: [usize; 3],
    pub tensor: Vec<Vec<Vec<f64>>>,
    pub response: Vec<f64>,
    pub sigma: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl TraceDocument {
    pub fn from_problem(problem: &TraceProblem) -> Self {
        let (m1, m2) = problem.shape();
        Self {
            shape: [problem.n(), m1, m2],
            tensor: problem
                .tensor
                .iter()
                .map(|x| (0..m1).map(|i| (0..m2).map(|j| x[(i, j)]).collect()).collect())
                .collect(),
            response: problem.response.iter().copied().collect(),
            sigma: problem.sigma,
            lambda: problem.lambda,
            tau: problem.tau,
        }
    }

    pub fn into_problem(self) -> Result<TraceProblem> {
        let [n, m1, m2] = self.shape;
        ensure_dims("tensor length", n, self.tensor.len())?;
        let mut tensor = Vec::with_capacity(n);
        for (i, rows) in self.tensor.into_iter().enumerate() {
            ensure_dims(&format!("rows of X_{i}"), m1, rows.len())?;
            for r in &rows {
                ensure_dims(&format!("columns of X_{i}"), m2, r.len())?;
            }
            tensor.push(DMatrix::from_fn(m1, m2, |a, b| rows[a][b]));
        }
        TraceProblem::new(
            tensor,
            DVector::from_vec(self.response),
            self.sigma,
            self.lambda,
            self.tau,
        )
    }
}

pub fn load_trace_problem(path: &Path) -> Result<TraceProblem> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: TraceDocument = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    doc.into_problem()
}

pub fn save_trace_problem(problem: &TraceProblem, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&TraceDocument::from_problem(problem)).expect("plain data serialises");
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixMethod {
    NnpLs,
    EwaSampler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEstimate {
    pub matrix: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub method: MatrixMethod,
}

impl MatrixEstimate {
    pub fn new(matrix: DMatrix<f64>, method: MatrixMethod) -> Self {
        let singular_values = singular_values_sorted(&matrix);
        Self {
            matrix,
            singular_values,
            method,
        }
    }
}

/// `(1/n) sum_i <X_i, A - B>^2`.
pub fn trace_loss(problem: &TraceProblem, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    problem.check_shape(a)?;
    problem.check_shape(b)?;
    Ok((problem.vectorised_design() * vec_of(&(a - b))).norm_squared() / problem.n() as f64)
}

/// `max(||(1/n) sum X_i X_i^T||, ||(1/n) sum X_i^T X_i||)^(1/2)`.
pub fn v_x(tensor: &[DMatrix<f64>]) -> Result<f64> {
    let first = tensor
        .first()
        .ok_or_else(|| Error::DimensionMismatch("empty design tensor".into()))?;
    let (m1, m2) = first.shape();
    let n = tensor.len() as f64;
    let mut left = DMatrix::zeros(m1, m1);
    let mut right = DMatrix::zeros(m2, m2);
    for x in tensor {
        ensure_dims("observation rows", m1, x.nrows())?;
        ensure_dims("observation columns", m2, x.ncols())?;
        left += x * x.transpose();
        right += x.transpose() * x;
    }
    let l = sym_max_eigenvalue(&(left / n)).max(0.0);
    let r = sym_max_eigenvalue(&(right / n)).max(0.0);
    Ok(l.max(r).sqrt())
}

/// Smallest `lambda` with `lambda >= 2 sigma v_X sqrt((2/n) log((m1 + m2)/delta))`.
pub fn calibrate_lambda_matrix(sigma: f64, v_x: f64, n: usize, m1: usize, m2: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0,1), got {delta}")));
    }
    if !(sigma >= 0.0 && v_x >= 0.0) || n == 0 || m1 == 0 || m2 == 0 {
        return Err(Error::InvalidParameter(
            "sigma, v_X >= 0 and n, m1, m2 >= 1 required".into(),
        ));
    }
    let log_term = ((m1 + m2) as f64 / delta).ln();
    Ok(2.0 * sigma * v_x * (2.0 / n as f64 * log_term).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnpFit {
    pub estimate: MatrixEstimate,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each iteration (starting value first).
    pub objective: Vec<f64>,
}

/// Proximal gradient with step `1 / L`, `L` the largest eigenvalue of the
/// vectorised Gram matrix, stopped when the objective decrease falls below
/// `tol * max(1, |objective|)`.
pub fn fit_nnp_ls(problem: &TraceProblem, tol: f64, max_iter: usize) -> Result<NnpFit> {
    if max_iter == 0 {
        return Err(Error::InvalidParameter("max_iter must be >= 1".into()));
    }
    let (m1, m2) = problem.shape();
    let a = problem.vectorised_design();
    let n = problem.n() as f64;
    let gram = a.tr_mul(a) / n;
    let corr = a.tr_mul(problem.response()) / n;
    let lip = sym_max_eigenvalue(&gram);
    let mut b = DMatrix::zeros(m1, m2);
    let mut objective = vec![problem.potential(&b)?];
    if lip <= 0.0 {
        return Ok(NnpFit {
            estimate: MatrixEstimate::new(b, MatrixMethod::NnpLs),
            iterations: 0,
            converged: true,
            objective,
        });
    }
    let step = 1.0 / lip;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let v = vec_of(&b);
        let grad = &gram * &v - &corr;
        let moved = unvec(&(v - grad * step), m1, m2);
        b = svt_exact(&moved, step * problem.lambda());
        let obj = problem.potential(&b)?;
        let prev = *objective.last().expect("nonempty");
        objective.push(obj);
        if prev - obj <= tol * obj.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(NnpFit {
        estimate: MatrixEstimate::new(b, MatrixMethod::NnpLs),
        iterations,
        converged,
        objective,
    })
}

/// SVT that keeps `1 x 1` and `1 x m` inputs on the scalar soft-threshold path.
fn svt_exact(a: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
    if a.len() == 1 {
        return DMatrix::from_element(1, 1, crate::linalg::soft_threshold(a[(0, 0)], c));
    }
    singular_value_threshold(a, c)
}

/// Nuclear norm of the `m1 x m2` matrix stored column-major in a vector.
#[derive(Debug, Clone, Copy)]
pub struct NuclearPenalty {
    pub m1: usize,
    pub m2: usize,
}

impl Penalty for NuclearPenalty {
    fn norm(&self, u: &DVector<f64>) -> f64 {
        if u.len() == 1 {
            return u[0].abs();
        }
        nuclear_norm(&unvec(u, self.m1, self.m2))
    }

    fn prox_into(&self, u: &DVector<f64>, threshold: f64, out: &mut DVector<f64>) {
        let m = svt_exact(&unvec(u, self.m1, self.m2), threshold);
        out.copy_from_slice(m.as_slice());
    }

    fn subgradient(&self, u: &DVector<f64>) -> DVector<f64> {
        let m = unvec(u, self.m1, self.m2);
        let svd = SVD::new(m, true, true);
        let smax = svd.singular_values.max();
        let (uu, vt) = (svd.u.expect("computed"), svd.v_t.expect("computed"));
        let mut g = DMatrix::zeros(self.m1, self.m2);
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if s > MATRIX_RANK_RTOL * smax && s > 0.0 {
                g += uu.column(k) * vt.row(k);
            }
        }
        vec_of(&g)
    }
}

pub fn matrix_target(problem: &TraceProblem) -> LinearTarget<NuclearPenalty> {
    let (m1, m2) = problem.shape();
    LinearTarget::new(
        problem.vectorised_design().clone(),
        problem.response().clone(),
        problem.lambda(),
        problem.tau(),
        NuclearPenalty { m1, m2 },
    )
}

/// Samples the matrix pseudo-posterior in the vectorised space, starting at the NNP-LS fit.
pub fn sample_matrix_posterior(problem: &TraceProblem, config: &SamplerConfig) -> Result<SampleSet> {
    config.validate()?;
    let (m1, m2) = problem.shape();
    if m1 * m2 > MAX_SAMPLER_ENTRIES {
        return Err(Error::InvalidParameter(format!(
            "matrix sampler supports m1 m2 <= {MAX_SAMPLER_ENTRIES}, got {}",
            m1 * m2
        )));
    }
    let start = fit_nnp_ls(problem, 1e-13, 100_000)?.estimate.matrix;
    sample_target(&matrix_target(problem), &vec_of(&start), config)
}

/// Sampler configuration for the matrix target.
pub fn matrix_sampler_config(
    problem: &TraceProblem,
    profile: crate::sampler::SamplerProfile,
    seed: u64,
) -> SamplerConfig {
    let target = matrix_target(problem);
    SamplerConfig::for_gram(target.gram(), problem.lambda(), problem.tau(), profile, seed)
}

/// Sample mean as a matrix estimate.
pub fn matrix_ewa(problem: &TraceProblem, samples: &SampleSet) -> Result<MatrixEstimate> {
    let (m1, m2) = problem.shape();
    ensure_dims("draw length", m1 * m2, samples.dim())?;
    let est = crate::sampler::ewa_from_samples(samples);
    Ok(MatrixEstimate::new(unvec(&est.mean, m1, m2), MatrixMethod::EwaSampler))
}

/// `H = m1 m2 tau - E G(U) + G(E U)` with `G(U) = ||U||^2_{L2} + lambda ||U||_*`,
/// and its Monte Carlo standard error.
pub fn matrix_h(problem: &TraceProblem, samples: &SampleSet) -> Result<(f64, f64)> {
    let (m1, m2) = problem.shape();
    ensure_dims("draw length", m1 * m2, samples.dim())?;
    let mean = crate::sampler::ewa_from_samples(samples).mean;
    Ok(target_h(&matrix_target(problem), samples, &mean))
}

/// `E ||U - E U||^2_{L2} <= m1 m2 tau`.
pub fn check_matrix_variance_bound(problem: &TraceProblem, samples: &SampleSet) -> Result<BoundReport> {
    let (m1, m2) = problem.shape();
    ensure_dims("draw length", m1 * m2, samples.dim())?;
    Ok(target_variance_bound(&matrix_target(problem), samples))
}

/// Exceedance of `V_n(U) > E V_n + tau sqrt(m1 m2) t` against `2 exp(-t/16)`.
pub fn check_matrix_concentration(problem: &TraceProblem, samples: &SampleSet, t: f64) -> Result<BoundReport> {
    let (m1, m2) = problem.shape();
    ensure_dims("draw length", m1 * m2, samples.dim())?;
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("t must be > 0, got {t}")));
    }
    Ok(target_concentration(&matrix_target(problem), samples, t))
}

/// Leading singular frames of `B-bar` restricted to the index set `J`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorFrame {
    v1: DMatrix<f64>,
    v2: DMatrix<f64>,
    m1: usize,
    m2: usize,
}

impl ProjectorFrame {
    /// `J` holds 0-based positions in the nonincreasing singular-value order
    /// and must lie within the numerical rank of `b_bar`.
    pub fn new(b_bar: &DMatrix<f64>, j: &[usize]) -> Result<Self> {
        let (m1, m2) = b_bar.shape();
        let svd = SVD::new(b_bar.clone(), true, true);
        let (u, vt) = (svd.u.expect("computed"), svd.v_t.expect("computed"));
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let smax = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > MATRIX_RANK_RTOL * smax && s > 0.0)
            .count();
        if let Some(&bad) = j.iter().find(|&&k| k >= rank) {
            return Err(Error::InvalidParameter(format!(
                "index {bad} outside the rank {rank} of B-bar"
            )));
        }
        let v1 = DMatrix::from_fn(m1, j.len(), |r, c| u[(r, order[j[c]])]);
        let v2 = DMatrix::from_fn(m2, j.len(), |r, c| vt[(order[j[c]], r)]);
        Ok(Self { v1, v2, m1, m2 })
    }

    pub fn j_len(&self) -> usize {
        self.v1.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.m1, self.m2)
    }
}

/// `(I - V1J V1J^T) U (I - V2J V2J^T)`.
pub fn project_jc(frame: &ProjectorFrame, u: &DMatrix<f64>) -> DMatrix<f64> {
    let left = u - &frame.v1 * (frame.v1.transpose() * u);
    &left - (&left * &frame.v2) * frame.v2.transpose()
}

/// `U - project_jc(U)`, of rank at most `2 |J|`.
pub fn project_jc_perp(frame: &ProjectorFrame, u: &DMatrix<f64>) -> DMatrix<f64> {
    u - project_jc(frame, u)
}

/// Norm consistency `||U||_* >= ||U||_op >= max |U_ab|`.
pub fn norms_consistent(u: &DMatrix<f64>) -> bool {
    let (nuc, op, entry) = (nuclear_norm(u), operator_norm(u), u.amax());
    let slack = 1e-12 * nuc.max(1.0);
    nuc + slack >= op && op + slack >= entry
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::numerical_rank;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn gauss(r: &mut rand_chacha::ChaCha8Rng, m1: usize, m2: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m1, m2, |_, _| StandardNormal.sample(r))
    }

    /// Every entry observed once, scaled by `sqrt(m1 m2)`.
    fn identity_sampling(m1: usize, m2: usize, y: &DMatrix<f64>, lambda: f64) -> TraceProblem {
        let s = ((m1 * m2) as f64).sqrt();
        let mut tensor = Vec::new();
        let mut resp = Vec::new();
        for b in 0..m2 {
            for a in 0..m1 {
                let mut x = DMatrix::zeros(m1, m2);
                x[(a, b)] = s;
                tensor.push(x);
                resp.push(y[(a, b)]);
            }
        }
        TraceProblem::new(tensor, DVector::from_vec(resp), 1.0, lambda, 0.01).unwrap()
    }

    #[test]
    fn loss_examples() {
        let mut r = rng(1);
        let tensor: Vec<_> = (0..5).map(|_| gauss(&mut r, 3, 2)).collect();
        let pb = TraceProblem::new(tensor.clone(), DVector::zeros(5), 1.0, 0.1, 0.1).unwrap();
        let (a, b) = (gauss(&mut r, 3, 2), gauss(&mut r, 3, 2));
        assert_eq!(trace_loss(&pb, &a, &a).unwrap(), 0.0);
        let mut want = 0.0;
        for x in &tensor {
            let mut ip = 0.0;
            for i in 0..3 {
                for j in 0..2 {
                    ip += x[(i, j)] * (a[(i, j)] - b[(i, j)]);
                }
            }
            want += ip * ip;
        }
        assert_close!(trace_loss(&pb, &a, &b).unwrap(), want / 5.0, 1e-12);

        let mut e11 = DMatrix::zeros(2, 2);
        e11[(0, 0)] = 1.0;
        let single = TraceProblem::new(vec![e11.clone()], DVector::zeros(1), 1.0, 0.1, 0.1).unwrap();
        assert_close!(
            trace_loss(&single, &(e11.clone() * 3.0), &DMatrix::zeros(2, 2)).unwrap(),
            9.0,
            1e-15
        );
        assert!(trace_loss(&single, &DMatrix::zeros(3, 2), &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn v_x_examples() {
        assert_close!(v_x(&[DMatrix::identity(3, 3)]).unwrap(), 1.0, 1e-15);
        let y = DMatrix::zeros(3, 4);
        let pb = identity_sampling(3, 4, &y, 0.0);
        // (1/n) sum X X^T = m2 I_{m1}, (1/n) sum X^T X = m1 I_{m2}
        assert_close!(v_x(pb.tensor()).unwrap(), 2.0, 1e-12);
        let scaled: Vec<_> = pb.tensor().iter().map(|x| x * -2.5).collect();
        assert_close!(v_x(&scaled).unwrap(), 5.0, 1e-12);
    }

    #[test]
    fn calibration_cases() {
        assert_eq!(calibrate_lambda_matrix(0.0, 2.0, 10, 3, 3, 0.1).unwrap(), 0.0);
        // log((m1 + m2)/delta) = 1
        let delta = 2.0 / std::f64::consts::E;
        assert_close!(calibrate_lambda_matrix(1.0, 1.0, 2, 1, 1, delta).unwrap(), 2.0, 1e-15);
        let v = calibrate_lambda_matrix(0.5, 3.0, 200, 8, 8, 0.05).unwrap();
        assert_close!(v, 2.0 * 0.5 * 3.0 * (0.01 * (16.0f64 / 0.05).ln()).sqrt(), 1e-14);
        assert!(calibrate_lambda_matrix(1.0, 1.0, 2, 1, 1, 1.0).is_err());
    }

    #[test]
    fn nnp_on_identity_sampling_is_svt() {
        let mut r = rng(2);
        let (m1, m2) = (4, 3);
        let y = gauss(&mut r, m1, m2);
        let n = (m1 * m2) as f64;
        for lambda in [0.0, 0.2, 0.7] {
            let pb = identity_sampling(m1, m2, &y, lambda);
            let fit = fit_nnp_ls(&pb, 1e-15, 10_000).unwrap();
            // V(B) = (1/2) ||Y/sqrt(n) - B||_F^2 + lambda ||B||_* up to a constant
            let want = singular_value_threshold(&(y.clone() / n.sqrt()), lambda);
            assert!((&fit.estimate.matrix - &want).amax() < 1e-10, "lambda {lambda}");
            assert!(fit.objective.windows(2).all(|w| w[1] <= w[0] + 1e-15));
            let v0 = pb.potential(&fit.estimate.matrix).unwrap();
            for _ in 0..50 {
                let probe = &fit.estimate.matrix + gauss(&mut r, m1, m2) * 0.01;
                assert!(pb.potential(&probe).unwrap() >= v0 - 1e-12);
            }
        }
        // lambda above the operator norm of (1/n) sum y_i X_i gives zero
        let pb = identity_sampling(m1, m2, &y, 1.0);
        let mut s = DMatrix::zeros(m1, m2);
        for (x, yi) in pb.tensor().iter().zip(pb.response().iter()) {
            s += x * *yi;
        }
        let thresh = operator_norm(&(s / n));
        let pb = pb.with_tuning(1.0, thresh * 1.0001, 0.01).unwrap();
        let fit = fit_nnp_ls(&pb, 1e-15, 1000).unwrap();
        assert!(fit.estimate.matrix.amax() < 1e-14);
    }

    #[test]
    fn projector_identities() {
        let mut r = rng(3);
        let b_bar = gauss(&mut r, 5, 4);
        let sv = singular_values_sorted(&b_bar);
        let frame = ProjectorFrame::new(&b_bar, &[0, 2]).unwrap();
        let u = gauss(&mut r, 5, 4);
        let pu = project_jc(&frame, &u);
        assert!((project_jc(&frame, &pu) - &pu).amax() < 1e-12);
        assert!(numerical_rank(&project_jc_perp(&frame, &u)) <= 4);
        assert_close!(nuclear_norm(&project_jc(&frame, &b_bar)), sv[1] + sv[3], 1e-10);

        let square = gauss(&mut r, 3, 3);
        let full = ProjectorFrame::new(&square, &[0, 1, 2]).unwrap();
        assert!(project_jc(&full, &u.view((0, 0), (3, 3)).into_owned()).amax() < 1e-12);
        assert!(ProjectorFrame::new(&DMatrix::zeros(3, 3), &[0]).is_err());
        assert!(norms_consistent(&u));
    }

    #[test]
    fn json_round_trip() {
        let mut r = rng(4);
        let tensor: Vec<_> = (0..3).map(|_| gauss(&mut r, 2, 3)).collect();
        let pb = TraceProblem::new(tensor, DVector::from_vec(vec![0.1, -0.2, 0.3]), 0.5, 0.2, 0.01).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        save_trace_problem(&pb, &path).unwrap();
        assert_eq!(load_trace_problem(&path).unwrap(), pb);
        let mut doc = TraceDocument::from_problem(&pb);
        doc.shape = [3, 2, 2];
        assert!(doc.into_problem().is_err());
    }
}
