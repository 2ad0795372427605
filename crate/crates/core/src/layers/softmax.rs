// SPDX-License-Identifier: Apache-2.0

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::gaussian::GaussianVector;

/// Max-shifted softmax.
pub fn softmax(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = v.mapv(|x| (x - max).exp());
    let total = e.sum();
    e / total
}

/// `J[i,j] = y_i(δ_ij − y_j)` for `y = softmax(·)`.
pub fn softmax_jacobian(y: ArrayView1<'_, f64>) -> Array2<f64> {
    let k = y.len();
    Array2::from_shape_fn((k, k), |(i, j)| {
        let delta = if i == j { 1.0 } else { 0.0 };
        y[i] * (delta - y[j])
    })
}

/// First-order moments of `softmax(f)`: `N(softmax(μ_f), J·Σ_f·Jᵀ)` with the
/// Jacobian taken at `μ_f`.
pub fn softmax_taylor(f: &GaussianVector) -> Result<GaussianVector> {
    if f.dim() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "softmax needs at least 2 classes, got {}",
            f.dim()
        )));
    }
    let y = softmax(f.mean());
    let j = softmax_jacobian(y.view());
    let cov = j.dot(&f.cov()).dot(&j.t());
    GaussianVector::new(y, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits() {
        let f = GaussianVector::point(Array1::zeros(10));
        let y = softmax_taylor(&f).unwrap();
        assert!(y.mean().iter().all(|&p| (p - 0.1).abs() < 1e-15));
        assert!(y.is_point_mass());
    }

    #[test]
    fn stable_for_large_logits() {
        let y = softmax(array![1000.0, 1001.0, -1000.0].view());
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rows_of_output_covariance_sum_to_zero() {
        let f = GaussianVector::new(
            array![0.3, -1.0, 2.0],
            array![[1.0, 0.2, 0.0], [0.2, 0.5, 0.1], [0.0, 0.1, 2.0]],
        )
        .unwrap();
        let y = softmax_taylor(&f).unwrap();
        for row in y.cov().rows() {
            assert!(row.sum().abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_single_class() {
        assert!(softmax_taylor(&GaussianVector::point(array![1.0])).is_err());
    }
}
