//! Compatibility factors of a design on the cone of dimensionality reduction.
//!
//! Vector case:
//! `kappa_{J,c} = inf { c^2 |J| (1/n)||X u||^2 / (c ||u_J||_1 - ||u_{J^c}||_1)^2 : ||u_{J^c}||_1 < c ||u_J||_1 }`.
//!
//! Exact mode fixes the sign pattern `s` of `u_J` (up to a global flip) and
//! minimises the convex function `F_s(u) = u^T S u / 2 - c s^T u_J + ||u_{J^c}||_1`.
//! Scaling `u -> t u` shows `min_u (u^T S u) / D_s(u)^2 = -1 / (2 min F_s)` with
//! `D_s(u) = c s^T u_J - ||u_{J^c}||_1 <= D(u)`, so the minimum over patterns is the
//! infimum of the ratio; an unbounded `F_s` means the infimum is 0.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l1_norm, nuclear_norm, numerical_rank, soft_threshold};
use crate::rng::SeedStream;
use crate::trace::{project_jc, project_jc_perp, ProjectorFrame};

/// Largest `|J|` accepted in exact mode (`2^(|J|-1)` sign patterns).
pub const MAX_EXACT_SUPPORT: usize = 20;
/// Default number of random cone directions in estimate mode.
pub const DEFAULT_BUDGET: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaMode {
    Exact,
    /// Best ratio found by search: an upper bound on the infimum.
    Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub value: f64,
    pub mode: KappaMode,
    /// Column-major witness; a vector has shape `(p, 1)`.
    pub witness: DVector<f64>,
    pub witness_shape: (usize, usize),
    /// Whether the infimum is attained inside the open cone (exact mode only).
    pub attained: bool,
}

impl KappaResult {
    pub fn witness_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.witness_shape.0, self.witness_shape.1, self.witness.as_slice())
    }
}

fn validate_set(j: &[usize], p: usize, c: f64) -> Result<()> {
    if j.is_empty() {
        return Err(Error::InvalidParameter("J must be nonempty".into()));
    }
    if let Some(&bad) = j.iter().find(|&&k| k >= p) {
        return Err(Error::InvalidParameter(format!("index {bad} outside 0..{p}")));
    }
    let mut sorted = j.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != j.len() {
        return Err(Error::InvalidParameter("J has repeated indices".into()));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParameter(format!("c must be > 0, got {c}")));
    }
    Ok(())
}

/// The defining ratio at `u`; `+inf` outside the open cone.
pub fn kappa_ratio(gram: &DMatrix<f64>, j: &[usize], c: f64, u: &DVector<f64>) -> f64 {
    let in_j: f64 = j.iter().map(|&k| u[k].abs()).sum();
    let out_j = l1_norm(u) - in_j;
    let d = c * in_j - out_j;
    if !(d > 0.0) {
        return f64::INFINITY;
    }
    c * c * j.len() as f64 * u.dot(&(gram * u)).max(0.0) / (d * d)
}

/// `kappa_{J,c}` for the design with Gram matrix `X^T X / n`.
pub fn kappa_vector(design: &DMatrix<f64>, j: &[usize], c: f64, mode: KappaMode, seed: u64) -> Result<KappaResult> {
    let gram = design.tr_mul(design) / design.nrows() as f64;
    kappa_from_gram(&gram, j, c, mode, seed)
}

pub fn kappa_from_gram(gram: &DMatrix<f64>, j: &[usize], c: f64, mode: KappaMode, seed: u64) -> Result<KappaResult> {
    let p = gram.nrows();
    validate_set(j, p, c)?;
    match mode {
        KappaMode::Exact => {
            if j.len() > MAX_EXACT_SUPPORT {
                return Err(Error::EnumerationTooLarge(format!(
                    "|J| = {} exceeds {MAX_EXACT_SUPPORT} in exact mode",
                    j.len()
                )));
            }
            kappa_exact(gram, j, c)
        }
        KappaMode::Estimate => kappa_estimate(gram, j, c, DEFAULT_BUDGET, seed),
    }
}

struct PatternMin {
    u: DVector<f64>,
    bounded: bool,
}

/// Coordinate descent on `F_s`, warm-started at `init` when given.
fn minimise_pattern(gram: &DMatrix<f64>, in_j: &[bool], s: &[f64], c: f64, init: Option<&DVector<f64>>) -> PatternMin {
    let p = gram.nrows();
    let mut u = match init {
        Some(v) => v.clone(),
        None => DVector::from_fn(p, |k, _| {
            if in_j[k] {
                s[k] * c / gram[(k, k)].max(1e-300)
            } else {
                0.0
            }
        }),
    };
    let mut su = gram * &u;
    let gram_scale = gram.amax().max(1e-300);
    for _ in 0..200_000 {
        let mut moved: f64 = 0.0;
        let before = u.clone();
        for k in 0..p {
            let g = gram[(k, k)];
            let old = u[k];
            let r = su[k] - g * old;
            let new = if in_j[k] {
                if g <= 0.0 {
                    // F_s is linear and decreasing along this coordinate
                    return PatternMin {
                        u: DVector::from_fn(p, |i, _| if i == k { s[k] } else { 0.0 }),
                        bounded: false,
                    };
                }
                (c * s[k] - r) / g
            } else if g > 0.0 {
                soft_threshold(-r, 1.0) / g
            } else {
                0.0
            };
            if new != old {
                su.axpy(new - old, &gram.column(k), 1.0);
                u[k] = new;
                moved = moved.max((new - old).abs());
            }
        }
        let scale = u.amax();
        if !scale.is_finite() || scale > 1e12 {
            return PatternMin { u, bounded: false };
        }
        // A sweep that moves along a null direction of S while increasing
        // D_s is a ray on which F_s decreases linearly.
        let d = &u - &before;
        let dn = d.amax();
        if dn > 0.0 && (gram * &d).amax() <= 1e-12 * gram_scale * dn {
            let lin: f64 = (0..p)
                .map(|k| if in_j[k] { c * s[k] * d[k] } else { -d[k].abs() })
                .sum();
            if lin > 1e-9 * dn {
                return PatternMin { u: d, bounded: false };
            }
        }
        if moved <= 1e-15 * scale.max(1e-300) {
            break;
        }
    }
    PatternMin { u, bounded: true }
}

/// Direction of an unbounded descent, projected onto the null space of the Gram matrix.
fn null_direction(gram: &DMatrix<f64>, u: &DVector<f64>) -> DVector<f64> {
    let eig = gram.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let mut d = DVector::zeros(u.len());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l <= 1e-12 * top.max(1e-300) {
            let v = eig.eigenvectors.column(i);
            d += v * v.dot(u);
        }
    }
    let norm = d.norm();
    if norm > 0.0 {
        d / norm
    } else {
        u / u.norm()
    }
}

fn kappa_exact(gram: &DMatrix<f64>, j: &[usize], c: f64) -> Result<KappaResult> {
    let p = gram.nrows();
    let mut in_j = vec![false; p];
    for &k in j {
        in_j[k] = true;
    }
    let patterns = 1usize << (j.len() - 1);
    let mut best: Option<(f64, DVector<f64>, bool)> = None;
    for bits in 0..patterns {
        let mut s = vec![0.0; p];
        for (i, &k) in j.iter().enumerate() {
            // first sign fixed: s and -s give the same ratio
            s[k] = if i > 0 && bits >> (i - 1) & 1 == 1 { -1.0 } else { 1.0 };
        }
        let PatternMin { u, bounded } = minimise_pattern(gram, &in_j, &s, c, None);
        let witness = if bounded { u } else { null_direction(gram, &u) };
        let mut ratio = kappa_ratio(gram, j, c, &witness);
        if !bounded && !ratio.is_finite() {
            // projection left the cone; fall back to the raw iterate
            ratio = 0.0;
        }
        if best.as_ref().is_none_or(|(r, _, _)| ratio < *r) {
            best = Some((ratio, witness, bounded));
        }
    }
    let (value, witness, attained) = best.expect("at least one pattern");
    Ok(KappaResult {
        value,
        mode: KappaMode::Exact,
        witness_shape: (p, 1),
        witness,
        attained,
    })
}

fn kappa_estimate(gram: &DMatrix<f64>, j: &[usize], c: f64, budget: usize, seed: u64) -> Result<KappaResult> {
    let p = gram.nrows();
    let mut rng = SeedStream::new(seed).named("kappa-vector").rng();
    let mut in_j = vec![false; p];
    for &k in j {
        in_j[k] = true;
    }
    let mut best_ratio = f64::INFINITY;
    let mut best = DVector::zeros(p);
    for _ in 0..budget.max(1) {
        let mut u: DVector<f64> = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let on_j: f64 = j.iter().map(|&k| u[k].abs()).sum();
        let off_j = l1_norm(&u) - on_j;
        if off_j > 0.0 {
            // place the direction uniformly in the cone's depth
            let target = c * on_j * rng.random::<f64>();
            for k in (0..p).filter(|&k| !in_j[k]) {
                u[k] *= target / off_j;
            }
        }
        let r = kappa_ratio(gram, j, c, &u);
        if r < best_ratio {
            best_ratio = r;
            best = u;
        }
    }
    if !best_ratio.is_finite() {
        return Err(Error::BudgetExhausted("no direction inside the cone".into()));
    }
    // local descent within the sign pattern of the best direction
    let s: Vec<f64> = (0..p)
        .map(|k| if in_j[k] && best[k] < 0.0 { -1.0 } else { 1.0 })
        .collect();
    let PatternMin { u, bounded } = minimise_pattern(gram, &in_j, &s, c, None);
    let polished = if bounded { u } else { null_direction(gram, &u) };
    let r = kappa_ratio(gram, j, c, &polished);
    if r < best_ratio {
        best_ratio = r;
        best = polished;
    }
    Ok(KappaResult {
        value: best_ratio,
        mode: KappaMode::Estimate,
        witness_shape: (p, 1),
        witness: best,
        attained: false,
    })
}

/// `c^2 |J| ||U||^2_{L2} / (c ||P_perp U||_* - ||P U||_*)^2`; `+inf` outside the cone.
/// `design` holds the vectorised observation matrices as rows.
pub fn kappa_matrix_ratio(design: &DMatrix<f64>, frame: &ProjectorFrame, c: f64, u: &DMatrix<f64>) -> f64 {
    let inner = nuclear_norm(&project_jc(frame, u));
    let outer = nuclear_norm(&project_jc_perp(frame, u));
    let d = c * outer - inner;
    if !(d > 0.0) {
        return f64::INFINITY;
    }
    let v = DVector::from_column_slice(u.as_slice());
    let energy = (design * v).norm_squared() / design.nrows() as f64;
    c * c * frame.j_len() as f64 * energy / (d * d)
}

/// Search estimate of the matrix compatibility factor: random cone members
/// followed by adaptive random-perturbation descent; `budget` ratio evaluations in total.
pub fn kappa_matrix(
    design: &DMatrix<f64>,
    frame: &ProjectorFrame,
    c: f64,
    budget: usize,
    seed: u64,
) -> Result<KappaResult> {
    let (m1, m2) = frame.shape();
    if design.ncols() != m1 * m2 {
        return Err(Error::DimensionMismatch(format!(
            "design has {} columns, expected {}",
            design.ncols(),
            m1 * m2
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParameter(format!("c must be > 0, got {c}")));
    }
    let mut rng = SeedStream::new(seed).named("kappa-matrix").rng();
    let gauss = |rng: &mut crate::rng::Rng| DMatrix::from_fn(m1, m2, |_, _| StandardNormal.sample(rng));
    let random_budget = budget / 2;
    let mut best_ratio = f64::INFINITY;
    let mut best = DMatrix::zeros(m1, m2);
    for _ in 0..random_budget.max(1) {
        let u1 = project_jc_perp(frame, &gauss(&mut rng));
        let u2 = project_jc(frame, &gauss(&mut rng));
        let (n1, n2) = (nuclear_norm(&u1), nuclear_norm(&u2));
        if n1 <= 0.0 {
            continue;
        }
        let scale = if n2 > 0.0 {
            c * n1 * rng.random::<f64>() / n2
        } else {
            0.0
        };
        let u = u1 + u2 * scale;
        let r = kappa_matrix_ratio(design, frame, c, &u);
        if r < best_ratio {
            best_ratio = r;
            best = u;
        }
    }
    if !best_ratio.is_finite() {
        return Err(Error::BudgetExhausted(
            "no cone member found (the projector onto the J directions is degenerate)".into(),
        ));
    }
    let mut step = 0.3 * best.norm();
    for _ in random_budget..budget {
        let candidate = &best + gauss(&mut rng) * (step / ((m1 * m2) as f64).sqrt());
        let r = kappa_matrix_ratio(design, frame, c, &candidate);
        if r < best_ratio {
            best_ratio = r;
            best = candidate / 1.0;
            step *= 1.5;
        } else {
            step *= 0.97;
        }
        if step < 1e-12 * best.norm() {
            step = 0.3 * best.norm();
        }
    }
    let perp_rank = numerical_rank(&project_jc_perp(frame, &best));
    debug_assert!(perp_rank <= 2 * frame.j_len());
    let norm = best.norm();
    Ok(KappaResult {
        value: best_ratio,
        mode: KappaMode::Estimate,
        witness: DVector::from_column_slice((best / norm).as_slice()),
        witness_shape: (m1, m2),
        attained: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn orthonormal(p: usize) -> DMatrix<f64> {
        DMatrix::identity(p, p) * (p as f64).sqrt()
    }

    #[test]
    fn orthonormal_design_gives_one() {
        for j in [vec![0], vec![1, 3], vec![0, 2, 4, 5]] {
            for c in [1.0, 3.0] {
                let k = kappa_vector(&orthonormal(6), &j, c, KappaMode::Exact, 0).unwrap();
                assert_close!(k.value, 1.0, 1e-9);
                assert!(k.attained);
                let r = kappa_ratio(&(orthonormal(6).tr_mul(&orthonormal(6)) / 6.0), &j, c, &k.witness);
                assert_close!(r, k.value, 1e-9);
            }
        }
    }

    #[test]
    fn one_dimensional() {
        let x = DMatrix::from_element(4, 1, 1.0);
        let k = kappa_vector(&x, &[0], 2.0, KappaMode::Exact, 0).unwrap();
        assert_close!(k.value, 1.0, 1e-12);
    }

    #[test]
    fn duplicated_columns() {
        // ratio (a + b)^2 / (c|a| - |b|)^2: equal to 1 for c = 1, but 0 at b = -a once c > 1
        let x = DMatrix::from_column_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let k1 = kappa_vector(&x, &[0], 1.0, KappaMode::Exact, 0).unwrap();
        assert_close!(k1.value, 1.0, 1e-9);
        let k3 = kappa_vector(&x, &[0], 3.0, KappaMode::Exact, 0).unwrap();
        assert!(k3.value < 1e-12);
        assert!(!k3.attained);
        assert!(k3.witness[0] * k3.witness[1] < 0.0);
    }

    #[test]
    fn scale_invariance_and_monotonicity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(8, 4, |_, _| StandardNormal.sample(&mut rng));
        let gram = x.tr_mul(&x) / 8.0;
        let mut prev = f64::INFINITY;
        for c in [1.0, 2.0, 3.0] {
            let k = kappa_vector(&x, &[0, 2], c, KappaMode::Exact, 0).unwrap();
            assert!(k.value <= prev + 1e-12);
            prev = k.value;
            let r = kappa_ratio(&gram, &[0, 2], c, &(&k.witness * 7.5));
            assert_close!(r, k.value, 1e-9 * k.value.max(1.0));
        }
    }

    #[test]
    fn estimate_is_an_upper_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(10, 5, |_, _| StandardNormal.sample(&mut rng));
        let exact = kappa_vector(&x, &[1, 3], 3.0, KappaMode::Exact, 0).unwrap();
        let est = kappa_vector(&x, &[1, 3], 3.0, KappaMode::Estimate, 11).unwrap();
        assert!(est.value >= exact.value * (1.0 - 1e-9));
        assert_eq!(est.mode, KappaMode::Estimate);
    }

    #[test]
    fn invalid_sets() {
        let x = orthonormal(3);
        assert!(kappa_vector(&x, &[], 1.0, KappaMode::Exact, 0).is_err());
        assert!(kappa_vector(&x, &[3], 1.0, KappaMode::Exact, 0).is_err());
        assert!(kappa_vector(&x, &[0], 0.0, KappaMode::Exact, 0).is_err());
        let big = orthonormal(22);
        let j: Vec<usize> = (0..21).collect();
        assert!(matches!(
            kappa_vector(&big, &j, 1.0, KappaMode::Exact, 0),
            Err(Error::EnumerationTooLarge(_))
        ));
    }

    #[test]
    fn matrix_kappa_identity_sampling() {
        let (m1, m2) = (3, 3);
        // every entry observed once with weight sqrt(m1 m2): ||U||_{L2} = ||U||_F
        let n = m1 * m2;
        let design = DMatrix::identity(n, n) * (n as f64).sqrt();
        let mut b_bar = DMatrix::zeros(m1, m2);
        b_bar[(0, 0)] = 2.0;
        let frame = ProjectorFrame::new(&b_bar, &[0]).unwrap();
        let k = kappa_matrix(&design, &frame, 3.0, 20_000, 9).unwrap();
        assert!(k.value.is_finite() && k.value > 0.0);
        let w = k.witness_matrix();
        assert!(numerical_rank(&project_jc_perp(&frame, &w)) <= 2);
        assert_close!(
            kappa_matrix_ratio(&design, &frame, 3.0, &(w.clone() * 4.0)),
            k.value,
            1e-9 * k.value
        );
        // ||U||_F^2 >= ||P_perp U||_*^2 / (2|J|), so the ratio is at least c^2 |J| / (2 |J| c^2)
        assert!(k.value >= 0.5 - 1e-12);
        assert!(kappa_matrix(&DMatrix::zeros(4, 8), &frame, 3.0, 10, 0).is_err());
    }
}
