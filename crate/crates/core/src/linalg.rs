// SPDX-License-Identifier: Apache-2.0

//! Small dense linear-algebra helpers on top of `ndarray`.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};

/// Largest `|a_ij - a_ji|`.
pub fn max_asymmetry(a: ArrayView2<'_, f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// Replaces `a` by `(a + aᵀ)/2`.
pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

pub fn frobenius(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn trace(a: ArrayView2<'_, f64>) -> f64 {
    a.diag().sum()
}

fn to_nalgebra(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn max_abs(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Eigenvalues of a symmetric matrix, ascending.
///
/// Exactly-zero rows are split off as zero eigenvalues and the rest is
/// solved at unit scale. nalgebra's QR iteration returns NaN on some
/// sparse matrices with entries around 1e-10, which pooled covariances of
/// mostly-dead ReLU maps produce routinely.
pub fn symmetric_eigenvalues(a: ArrayView2<'_, f64>) -> Vec<f64> {
    let n = a.nrows();
    let live: Vec<usize> = (0..n).filter(|&i| a.row(i).iter().any(|&v| v != 0.0)).collect();
    let mut vals = vec![0.0; n - live.len()];
    if !live.is_empty() {
        let scale = max_abs(a);
        let sub = DMatrix::from_fn(live.len(), live.len(), |i, j| a[[live[i], live[j]]] / scale);
        vals.extend(sub.symmetric_eigenvalues().iter().map(|v| v * scale));
    }
    vals.sort_by(f64::total_cmp);
    vals
}

pub fn min_eigenvalue(a: ArrayView2<'_, f64>) -> f64 {
    symmetric_eigenvalues(a).first().copied().unwrap_or(0.0)
}

/// Clips negative eigenvalues of a symmetric matrix at zero.
pub fn project_psd(a: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut out = Array2::zeros((n, n));
    let scale = max_abs(a);
    if scale == 0.0 {
        return out;
    }
    let eig = SymmetricEigen::new(to_nalgebra(a) / scale);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let lambda = lambda * scale;
        if lambda <= 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        for i in 0..n {
            let vi = lambda * v[i];
            for j in 0..n {
                out[[i, j]] += vi * v[j];
            }
        }
    }
    symmetrize(&mut out);
    out
}

/// Plain Cholesky. Returns `None` when a pivot is not strictly positive.
pub fn cholesky_lower(a: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Some(l)
}

/// Zeroes the strict upper triangle.
pub fn lower_triangle(a: &mut Array2<f64>) {
    let cols = a.ncols();
    for (i, mut row) in a.rows_mut().into_iter().enumerate() {
        for j in (i + 1)..cols {
            row[j] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_two_by_two() {
        let l = cholesky_lower(array![[4.0, 2.0], [2.0, 3.0]].view()).unwrap();
        assert_eq!(l[[0, 0]], 2.0);
        assert_eq!(l[[1, 0]], 1.0);
        assert_eq!(l[[0, 1]], 0.0);
        assert!((l[[1, 1]] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        assert!(cholesky_lower(array![[1.0, 2.0], [2.0, 1.0]].view()).is_none());
    }

    #[test]
    fn projection_clips_negative_spectrum() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        let p = project_psd(a.view());
        let vals = symmetric_eigenvalues(p.view());
        assert!(vals[0].abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
    }
}
