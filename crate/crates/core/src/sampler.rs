//! Moreau-Yosida regularised unadjusted Langevin sampling of the pseudo-posterior
//! for general designs, and everything computed from a sample set: the EWA,
//! `H(tau)`, the EWA risk estimate and empirical checks of the variance and
//! concentration inequalities.
//!
//! The chain runs on a generic target `exp(-(q(u) + lambda pen(u)) / tau)` with
//! `q(u) = (1/2n)||y - A u||^2` so the same code serves the vector problem
//! (`pen = l1`) and vectorised trace regression (`pen = nuclear norm`).

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{EstimateMethod, EwaEstimate};
use crate::lasso::fit_lasso;
use crate::linalg::{l1_norm, soft_threshold, sym_max_eigenvalue, sym_min_eigenvalue};
use crate::model::{BoundReport, RegressionProblem};
use crate::rng::SeedStream;
use crate::stats;

/// Convex, positively homogeneous penalty with a cheap proximal map.
pub trait Penalty: Sync {
    fn norm(&self, u: &DVector<f64>) -> f64;
    /// Writes the proximal map of `threshold * norm` at `u` into `out`.
    fn prox_into(&self, u: &DVector<f64>, threshold: f64, out: &mut DVector<f64>);
    /// One element of the subdifferential of `norm` at `u`.
    fn subgradient(&self, u: &DVector<f64>) -> DVector<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct L1Penalty;

impl Penalty for L1Penalty {
    fn norm(&self, u: &DVector<f64>) -> f64 {
        l1_norm(u)
    }

    fn prox_into(&self, u: &DVector<f64>, threshold: f64, out: &mut DVector<f64>) {
        for (o, &v) in out.iter_mut().zip(u.iter()) {
            *o = soft_threshold(v, threshold);
        }
    }

    fn subgradient(&self, u: &DVector<f64>) -> DVector<f64> {
        u.map(|v| if v == 0.0 { 0.0 } else { v.signum() })
    }
}

/// `exp(-((1/2n)||y - A u||^2 + lambda pen(u)) / tau)` in the form used by the chain.
#[derive(Debug, Clone)]
pub struct LinearTarget<P> {
    pub design: DMatrix<f64>,
    pub response: DVector<f64>,
    pub lambda: f64,
    pub tau: f64,
    pub penalty: P,
    gram: DMatrix<f64>,
    corr: DVector<f64>,
}

impl<P: Penalty> LinearTarget<P> {
    pub fn new(design: DMatrix<f64>, response: DVector<f64>, lambda: f64, tau: f64, penalty: P) -> Self {
        let n = design.nrows() as f64;
        let gram = design.tr_mul(&design) / n;
        let corr = design.tr_mul(&response) / n;
        Self {
            design,
            response,
            lambda,
            tau,
            penalty,
            gram,
            corr,
        }
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn potential(&self, u: &DVector<f64>) -> f64 {
        let r = &self.response - &self.design * u;
        r.norm_squared() / (2.0 * self.n() as f64) + self.lambda * self.penalty.norm(u)
    }

    /// `(1/n)||A u||^2 + lambda pen(u)`.
    pub fn peakedness(&self, u: &DVector<f64>) -> f64 {
        (&self.design * u).norm_squared() / self.n() as f64 + self.lambda * self.penalty.norm(u)
    }

    pub fn loss(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (&self.design * (a - b)).norm_squared() / self.n() as f64
    }
}

/// How to pick the step size and envelope parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerProfile {
    /// `gamma = min(tau, 1/L)`, `step = gamma / 4`: cheap, but the envelope
    /// smooths the penalty over a width of order `lambda`.
    #[default]
    Default,
    /// Envelope width a small fraction of the posterior scale; slower mixing,
    /// much smaller bias.
    Accurate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub step_size: f64,
    pub moreau_gamma: f64,
    pub burn_in: usize,
    pub n_samples: usize,
    pub thinning: usize,
    pub seed: u64,
    /// Independent chains; draws are split between them and concatenated.
    #[serde(default = "one")]
    pub chains: usize,
}

fn one() -> usize {
    1
}

/// Relative envelope width used by [`SamplerProfile::Accurate`].
const ACCURATE_ENVELOPE: f64 = 0.05;

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size must be > 0, got {}", self.step_size));
        }
        if !(self.moreau_gamma > 0.0 && self.moreau_gamma.is_finite()) {
            return bad(format!("moreau_gamma must be > 0, got {}", self.moreau_gamma));
        }
        if self.step_size >= self.moreau_gamma {
            return bad(format!(
                "step_size ({}) must be smaller than moreau_gamma ({})",
                self.step_size, self.moreau_gamma
            ));
        }
        if self.n_samples < 100 {
            return bad(format!("n_samples must be >= 100, got {}", self.n_samples));
        }
        if self.thinning == 0 || self.chains == 0 {
            return bad("thinning and chains must be >= 1".into());
        }
        Ok(())
    }

    /// Configuration for a target with Gram matrix `gram`.
    pub fn for_gram(gram: &DMatrix<f64>, lambda: f64, tau: f64, profile: SamplerProfile, seed: u64) -> Self {
        let eig_max = sym_max_eigenvalue(gram).max(f64::MIN_POSITIVE);
        let inv_l = tau / eig_max;
        match profile {
            SamplerProfile::Default => {
                let gamma = tau.min(inv_l);
                Self {
                    step_size: gamma / 4.0,
                    moreau_gamma: gamma,
                    burn_in: 10_000,
                    n_samples: 5_000,
                    thinning: 5,
                    seed,
                    chains: 1,
                }
            }
            SamplerProfile::Accurate => {
                let mut gamma = inv_l;
                if lambda > 0.0 {
                    gamma = gamma.min(ACCURATE_ENVELOPE * (tau / lambda).powi(2));
                }
                let step = (gamma / 4.0).min(0.02 * inv_l);
                // steps needed to move one posterior standard deviation along
                // the flattest direction of the quadratic part
                let eig_min = sym_min_eigenvalue(gram).max(0.05 * eig_max).max(f64::MIN_POSITIVE);
                let relax = (tau / (step * eig_min)).ceil() as usize;
                Self {
                    step_size: step,
                    moreau_gamma: gamma,
                    burn_in: (5 * relax).clamp(2_000, 2_000_000),
                    n_samples: 5_000,
                    thinning: (relax / 4).clamp(1, 1_000),
                    seed,
                    chains: 1,
                }
            }
        }
    }

    pub fn for_problem(problem: &RegressionProblem, profile: SamplerProfile, seed: u64) -> Self {
        Self::for_gram(&problem.gram(), problem.lambda(), problem.tau(), profile, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub draws: Vec<DVector<f64>>,
    pub config: SamplerConfig,
    /// Always 1: the chain is unadjusted.
    pub acceptance_rate: f64,
    /// Number of draws contributed by each chain, in order.
    pub chain_lengths: Vec<usize>,
}

impl SampleSet {
    /// Wraps externally produced draws as a single chain.
    pub fn from_draws(draws: Vec<DVector<f64>>, config: SamplerConfig) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::InvalidParameter("empty sample set".into()));
        }
        let p = draws[0].len();
        if draws.iter().any(|d| d.len() != p) {
            return Err(Error::DimensionMismatch("draws of unequal length".into()));
        }
        let len = draws.len();
        Ok(Self {
            draws,
            config,
            acceptance_rate: 1.0,
            chain_lengths: vec![len],
        })
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.draws.first().map_or(0, |d| d.len())
    }

    /// Mean of a scalar series over the draws and its Monte Carlo standard
    /// error, with the effective sample size summed over chains.
    pub fn series_mean_se(&self, series: &[f64]) -> (f64, f64) {
        let m = stats::mean(series);
        let mut ess = 0.0;
        let mut start = 0;
        for &len in &self.chain_lengths {
            ess += stats::effective_sample_size(&series[start..start + len]);
            start += len;
        }
        (m, (stats::variance(series) / ess.max(1.0)).sqrt())
    }

    fn map<F: Fn(&DVector<f64>) -> f64>(&self, f: F) -> Vec<f64> {
        self.draws.iter().map(f).collect()
    }
}

/// Runs the chain(s) on `target`, starting every chain at `init`.
pub fn sample_target<P: Penalty>(
    target: &LinearTarget<P>,
    init: &DVector<f64>,
    config: &SamplerConfig,
) -> Result<SampleSet> {
    config.validate()?;
    if init.len() != target.dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial point has length {}, expected {}",
            init.len(),
            target.dim()
        )));
    }
    let root = SeedStream::new(config.seed);
    let base = config.n_samples / config.chains;
    let lengths: Vec<usize> = (0..config.chains)
        .map(|c| base + usize::from(c < config.n_samples % config.chains))
        .collect();
    let run = |c: usize| run_chain(target, init, config, lengths[c], root.child(c as u64));

    #[cfg(feature = "parallel")]
    let chains: Vec<Result<Vec<DVector<f64>>>> = {
        use rayon::prelude::*;
        (0..config.chains).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let chains: Vec<Result<Vec<DVector<f64>>>> = (0..config.chains).map(run).collect();

    let mut draws = Vec::with_capacity(config.n_samples);
    for chain in chains {
        draws.extend(chain?);
    }
    Ok(SampleSet {
        draws,
        config: *config,
        acceptance_rate: 1.0,
        chain_lengths: lengths,
    })
}

fn run_chain<P: Penalty>(
    target: &LinearTarget<P>,
    init: &DVector<f64>,
    config: &SamplerConfig,
    keep: usize,
    stream: SeedStream,
) -> Result<Vec<DVector<f64>>> {
    let mut rng = stream.rng();
    let d = target.dim();
    let (delta, gamma, tau) = (config.step_size, config.moreau_gamma, target.tau);
    let threshold = gamma * target.lambda / tau;
    let noise = (2.0 * delta).sqrt();
    let (keep_weight, prox_weight, grad_weight) = (1.0 - delta / gamma, delta / gamma, delta / tau);

    let mut u = init.clone();
    let mut prox = DVector::zeros(d);
    let mut grad = DVector::zeros(d);
    let mut draws = Vec::with_capacity(keep);
    let total = config.burn_in + keep * config.thinning;
    for it in 1..=total {
        target.penalty.prox_into(&u, threshold, &mut prox);
        grad.gemv(1.0, &target.gram, &u, 0.0);
        grad -= &target.corr;
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            u[j] = keep_weight * u[j] + prox_weight * prox[j] - grad_weight * grad[j] + noise * z;
        }
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                iteration: it,
                message: format!("non-finite iterate (step {delta:e}, gamma {gamma:e})"),
            });
        }
        if it > config.burn_in && (it - config.burn_in) % config.thinning == 0 {
            draws.push(u.clone());
        }
    }
    Ok(draws)
}

fn vector_target(problem: &RegressionProblem) -> LinearTarget<L1Penalty> {
    LinearTarget::new(
        problem.design().clone(),
        problem.response().clone(),
        problem.lambda(),
        problem.tau(),
        L1Penalty,
    )
}

/// Draws from `exp(-V_n / tau)` (up to the envelope and discretisation bias),
/// starting at the lasso fit.
pub fn sample_posterior(problem: &RegressionProblem, config: &SamplerConfig) -> Result<SampleSet> {
    config.validate()?;
    let start = fit_lasso(problem, 1e-12, 100_000)?.coefficients;
    sample_target(&vector_target(problem), &start, config)
}

/// Empirical mean and covariance of the draws; `h_value` is left unset.
pub fn ewa_from_samples(samples: &SampleSet) -> EwaEstimate {
    let p = samples.dim();
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(p);
    for d in &samples.draws {
        mean += d;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(p, p);
    for d in &samples.draws {
        let c = d - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n;
    cov = (&cov + cov.transpose()) * 0.5;
    let se = DVector::from_fn(p, |j, _| {
        let col = samples.map(|d| d[j]);
        samples.series_mean_se(&col).1
    });
    EwaEstimate {
        mean,
        covariance: cov,
        h_value: None,
        method: EstimateMethod::Sampler,
        mc_std_error: se,
    }
}

/// `H(tau) = b^T S b + lambda ||b||_1 - b^T S b_LS` at the EWA `b`, with
/// `S = X^T X / n` and `b_LS` the minimum-norm least-squares fit.
pub fn h_general(problem: &RegressionProblem, ewa: &EwaEstimate, ls: &DVector<f64>) -> Result<f64> {
    problem.check_len(&ewa.mean)?;
    problem.check_len(ls)?;
    let b = &ewa.mean;
    let s = problem.gram();
    let sb = &s * b;
    Ok(b.dot(&sb) + problem.lambda() * l1_norm(b) - sb.dot(ls))
}

/// [`h_general`] with a delta-method Monte Carlo standard error.
pub fn h_general_with_se(
    problem: &RegressionProblem,
    samples: &SampleSet,
    ewa: &EwaEstimate,
    ls: &DVector<f64>,
) -> Result<(f64, f64)> {
    let h = h_general(problem, ewa, ls)?;
    let s = problem.gram();
    let b = &ewa.mean;
    let g = &s * b * 2.0 + L1Penalty.subgradient(b) * problem.lambda() - &s * ls;
    let series = samples.map(|d| g.dot(d));
    Ok((h, samples.series_mean_se(&series).1))
}

/// `H` by its definition `d tau - E G(u) + G(E u)` on a sample set, with its
/// delta-method standard error.
pub fn target_h<P: Penalty>(target: &LinearTarget<P>, samples: &SampleSet, mean: &DVector<f64>) -> (f64, f64) {
    let d = target.dim() as f64;
    let grad = target.gram() * mean * 2.0 + target.penalty.subgradient(mean) * target.lambda;
    let g_series = samples.map(|u| target.peakedness(u));
    let lin_series: Vec<f64> = samples
        .draws
        .iter()
        .zip(&g_series)
        .map(|(u, g)| g - grad.dot(u))
        .collect();
    let h = d * target.tau - stats::mean(&g_series) + target.peakedness(mean);
    (h, samples.series_mean_se(&lin_series).1)
}

/// `p tau - E G(u) + G(E u)` estimated from `samples`, with its standard error.
pub fn h_by_definition(problem: &RegressionProblem, samples: &SampleSet, ewa: &EwaEstimate) -> Result<(f64, f64)> {
    problem.check_len(&ewa.mean)?;
    Ok(target_h(&vector_target(problem), samples, &ewa.mean))
}

/// Mean, covariance, `H(tau)` (general identity) and standard errors in one pass.
pub fn summarize(problem: &RegressionProblem, samples: &SampleSet) -> Result<EwaEstimate> {
    problem.check_len(&DVector::zeros(samples.dim()))?;
    let mut est = ewa_from_samples(samples);
    let ls = crate::linalg::least_squares_pinv(problem.design(), problem.response());
    est.h_value = Some(h_general(problem, &est, &ls)?);
    Ok(est)
}

/// Risk estimate `(1/n)||y - X b||^2 - sigma^2 + (2 sigma^2 / (n^2 tau)) tr(X Cov X^T)`.
pub fn ewa_sure(problem: &RegressionProblem, ewa: &EwaEstimate) -> Result<f64> {
    problem.check_len(&ewa.mean)?;
    let (n, p) = (problem.n(), problem.p());
    crate::error::ensure_dims("covariance size", p * p, ewa.covariance.len())?;
    let n_f = n as f64;
    let sigma2 = problem.sigma().powi(2);
    let resid = problem.response() - problem.design() * &ewa.mean;
    // tr(X C X^T) = sum_i x_i^T C x_i
    let xc = problem.design() * &ewa.covariance;
    let trace: f64 = xc.component_mul(problem.design()).sum();
    Ok(resid.norm_squared() / n_f - sigma2 + 2.0 * sigma2 / (n_f * n_f * problem.tau()) * trace)
}

/// `E (1/n)||A(u - mean)||^2 <= d tau` on a sample set.
pub fn target_variance_bound<P: Penalty>(target: &LinearTarget<P>, samples: &SampleSet) -> BoundReport {
    let mean = ewa_mean(samples);
    let series = samples.map(|u| target.loss(u, &mean));
    let (lhs, se) = samples.series_mean_se(&series);
    let rhs = target.dim() as f64 * target.tau;
    BoundReport::with_tolerance("variance-bound", lhs, rhs, 3.0 * se + 1e-12 * rhs).with_context("mc_se", se)
}

/// Frequency of `V(u) > E V + tau sqrt(d) t` against `2 exp(-t/16)`.
pub fn target_concentration<P: Penalty>(target: &LinearTarget<P>, samples: &SampleSet, t: f64) -> BoundReport {
    let v = samples.map(|u| target.potential(u));
    let mean_v = stats::mean(&v);
    let cut = mean_v + target.tau * (target.dim() as f64).sqrt() * t;
    let exceed: Vec<f64> = v.iter().map(|&x| f64::from(u8::from(x > cut))).collect();
    let freq = stats::mean(&exceed);
    let rhs = 2.0 * (-t / 16.0).exp();
    let ess = ess_of(samples, &exceed);
    let se = stats::binomial_se(rhs.min(1.0).max(freq), ess.round() as usize);
    BoundReport::with_tolerance("potential-concentration", freq, rhs, 3.0 * se)
        .with_context("t", t)
        .with_context("draws", samples.len())
}

fn ewa_mean(samples: &SampleSet) -> DVector<f64> {
    let mut mean = DVector::zeros(samples.dim());
    for d in &samples.draws {
        mean += d;
    }
    mean / samples.len() as f64
}

fn ess_of(samples: &SampleSet, series: &[f64]) -> f64 {
    let mut ess = 0.0;
    let mut start = 0;
    for &len in &samples.chain_lengths {
        ess += stats::effective_sample_size(&series[start..start + len]);
        start += len;
    }
    ess
}

/// `(1/n) E||X(u - b)||^2 <= p tau` with a three-standard-error tolerance.
pub fn check_variance_bound(problem: &RegressionProblem, samples: &SampleSet) -> Result<BoundReport> {
    problem.check_len(&DVector::zeros(samples.dim()))?;
    Ok(target_variance_bound(&vector_target(problem), samples))
}

/// Exceedance frequency of `V_n(u) > E V_n + tau sqrt(p) t` against `2 exp(-t/16)`.
pub fn check_concentration(problem: &RegressionProblem, samples: &SampleSet, t: f64) -> Result<BoundReport> {
    problem.check_len(&DVector::zeros(samples.dim()))?;
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("t must be > 0, got {t}")));
    }
    Ok(target_concentration(&vector_target(problem), samples, t))
}

/// Fraction of draws violating `(1/n)||X(u - beta*)||^2 <= 9 lambda^2 |J| / (2 kappa) + 8 p tau`
/// with `J = supp(beta*)` and `kappa = kappa_{J,3}`, against `2 exp(-sqrt(p)/16)`.
pub fn check_posterior_concentration(
    problem: &RegressionProblem,
    samples: &SampleSet,
    beta_star: &DVector<f64>,
    kappa: f64,
) -> Result<BoundReport> {
    problem.check_len(beta_star)?;
    let p = problem.p() as f64;
    let support = beta_star.iter().filter(|v| **v != 0.0).count() as f64;
    let radius = 9.0 * problem.lambda().powi(2) * support / (2.0 * kappa) + 8.0 * p * problem.tau();
    let target = vector_target(problem);
    let miss: Vec<f64> = samples.map(|u| f64::from(u8::from(target.loss(u, beta_star) > radius)));
    let freq = stats::mean(&miss);
    let rhs = 2.0 * (-p.sqrt() / 16.0).exp();
    let se = stats::binomial_se(rhs.min(1.0).max(freq), ess_of(samples, &miss).round() as usize);
    Ok(
        BoundReport::with_tolerance("posterior-concentration", freq, rhs, 3.0 * se)
            .with_context("radius", radius)
            .with_context("kappa", kappa),
    )
}

/// `E V_n(u) + (1/2n) E||X(u - probe)||^2 <= p tau + V_n(probe)`.
pub fn check_potential_probe(
    problem: &RegressionProblem,
    samples: &SampleSet,
    probe: &DVector<f64>,
) -> Result<BoundReport> {
    problem.check_len(probe)?;
    let target = vector_target(problem);
    let series = samples.map(|u| target.potential(u) + 0.5 * target.loss(u, probe));
    let (lhs, se) = samples.series_mean_se(&series);
    let rhs = problem.p() as f64 * problem.tau() + target.potential(probe);
    Ok(BoundReport::with_tolerance("potential-probe", lhs, rhs, 3.0 * se).with_context("mc_se", se))
}
