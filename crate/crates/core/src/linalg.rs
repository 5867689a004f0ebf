//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

/// Relative singular-value cutoff for pseudoinverses and numerical rank.
pub const RANK_RTOL: f64 = 1e-10;

/// Soft thresholding `sign(x) max(|x| - c, 0)`; values exactly at the threshold map to 0.
#[inline]
pub fn soft_threshold(x: f64, c: f64) -> f64 {
    if x > c {
        x - c
    } else if x < -c {
        x + c
    } else {
        0.0
    }
}

pub fn soft_threshold_vec(x: &DVector<f64>, c: f64) -> DVector<f64> {
    x.map(|v| soft_threshold(v, c))
}

pub fn l1_norm(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Numerical rank with cutoff `RANK_RTOL * s_max`.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.singular_values();
    let smax = sv.max();
    if smax <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_RTOL * smax).count()
}

/// Minimum-norm least-squares solution `X^+ y` with cutoff `RANK_RTOL * s_max`.
pub fn least_squares_pinv(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = SVD::new(x.clone(), true, true);
    let smax = svd.singular_values.max();
    let eps = if smax > 0.0 { RANK_RTOL * smax } else { 1.0 };
    svd.solve(y, eps).expect("u and v were computed")
}

/// Largest eigenvalue of a symmetric matrix.
pub fn sym_max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone()).eigenvalues.max()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone()).eigenvalues.min()
}

/// Singular values in nonincreasing order.
pub fn singular_values_sorted(a: &DMatrix<f64>) -> DVector<f64> {
    let mut sv: Vec<f64> = a.singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    DVector::from_vec(sv)
}

pub fn nuclear_norm(a: &DMatrix<f64>) -> f64 {
    a.singular_values().sum()
}

pub fn operator_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

/// Singular value thresholding: the proximal map of `c ||.||_*`.
pub fn singular_value_threshold(a: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
    let mut svd = SVD::new(a.clone(), true, true);
    for s in svd.singular_values.iter_mut() {
        *s = (*s - c).max(0.0);
    }
    svd.recompose().expect("u and v were computed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_ties_to_zero() {
        assert_eq!(soft_threshold(1.0, 1.0), 0.0);
        assert_eq!(soft_threshold(-1.0, 1.0), 0.0);
        assert_eq!(soft_threshold(2.5, 1.0), 1.5);
        assert_eq!(soft_threshold(-2.5, 1.0), -1.5);
    }

    #[test]
    fn rank_of_duplicated_columns() {
        let a = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(numerical_rank(&a), 1);
        assert_eq!(numerical_rank(&DMatrix::zeros(3, 2)), 0);
    }

    #[test]
    fn pinv_matches_inverse_for_square() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let x = least_squares_pinv(&a, &y);
        assert!((&a * &x - &y).norm() < 1e-12);
    }

    #[test]
    fn svt_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.5]));
        let b = singular_value_threshold(&a, 1.0);
        assert!((b[(0, 0)] - 2.0).abs() < 1e-12);
        assert!(b[(1, 1)].abs() < 1e-12);
    }
}
