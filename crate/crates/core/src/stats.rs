//! Monte Carlo summaries for correlated chains.

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divides by `N`).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

/// Effective sample size with the initial positive sequence estimator:
/// autocorrelations are summed in adjacent pairs until the first pair
/// whose sum is negative.
pub fn effective_sample_size(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return n as f64;
    }
    let m = mean(xs);
    let centred: Vec<f64> = xs.iter().map(|x| x - m).collect();
    let c0 = centred.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if c0 <= 0.0 || !c0.is_finite() {
        return n as f64;
    }
    let autocorr = |k: usize| -> f64 {
        centred[..n - k]
            .iter()
            .zip(&centred[k..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / (n as f64 * c0)
    };
    let mut tau = -1.0;
    let mut k = 0;
    while k + 1 < n {
        let pair = if k == 0 { 1.0 } else { autocorr(k) } + autocorr(k + 1);
        if pair < 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 2;
    }
    (n as f64 / tau.max(1.0 / n as f64)).min(n as f64)
}

/// Mean and its Monte Carlo standard error `sd / sqrt(ESS)`.
pub fn mean_with_se(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let ess = effective_sample_size(xs);
    (m, (variance(xs) / ess).sqrt())
}

/// Standard error of the mean of independent replicates (`N - 1` variance).
pub fn iid_standard_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::INFINITY;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Binomial standard error at success probability `q` (clamped to `[0, 1]`).
pub fn binomial_se(q: f64, trials: usize) -> f64 {
    let q = q.clamp(0.0, 1.0);
    (q * (1.0 - q) / trials.max(1) as f64).sqrt()
}
