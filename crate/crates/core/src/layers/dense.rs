// SPDX-License-Identifier: Apache-2.0

//! Channel concatenation and the fully-connected layer.

use ndarray::{s, Array1, Array2};

use super::factor::CovFactor;
use crate::error::{Error, Result};
use crate::gaussian::GaussianVector;

/// Independent Gaussian weight vectors `w_h ~ N(m_h, L_h·L_hᵀ)`, one per
/// output neuron. No bias.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalDenseWeight {
    /// `H × D`, row `h` is `m_h`.
    pub means: Array2<f64>,
    pub cov_factors: Vec<CovFactor>,
}

impl VariationalDenseWeight {
    pub fn new(means: Array2<f64>, cov_factors: Vec<CovFactor>) -> Result<Self> {
        if cov_factors.len() != means.nrows() || cov_factors.iter().any(|f| f.dim() != means.ncols()) {
            return Err(Error::DimensionMismatch(format!(
                "{} neurons of width {} need as many {}-dimensional factors",
                means.nrows(),
                means.ncols(),
                means.ncols()
            )));
        }
        Ok(Self { means, cov_factors })
    }

    pub fn outputs(&self) -> usize {
        self.means.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.means.ncols()
    }
}

/// Stacks per-kernel Gaussians: concatenated mean, block-diagonal covariance.
pub fn concat_channels(per_kernel: &[GaussianVector]) -> Result<GaussianVector> {
    if per_kernel.is_empty() {
        return Err(Error::EmptyList);
    }
    let total: usize = per_kernel.iter().map(GaussianVector::dim).sum();
    let mut mean = Array1::zeros(total);
    let mut cov = Array2::zeros((total, total));
    let mut at = 0;
    for g in per_kernel {
        let d = g.dim();
        mean.slice_mut(s![at..at + d]).assign(&g.mean());
        cov.slice_mut(s![at..at + d, at..at + d]).assign(&g.cov());
        at += d;
    }
    GaussianVector::new(mean, cov)
}

/// Output moments of `f_h = w_hᵀ b` with `b` independent of the weights:
///
/// * `μ_f[h] = m_hᵀ μ_b`
/// * `Σ_f[i,i] = tr(Σ_i Σ_b) + m_iᵀ Σ_b m_i + μ_bᵀ Σ_i μ_b`
/// * `Σ_f[i,j] = m_iᵀ Σ_b m_j` for `i ≠ j`
pub fn dense_forward(b: &GaussianVector, w: &VariationalDenseWeight) -> Result<GaussianVector> {
    if b.dim() != w.inputs() {
        return Err(Error::DimensionMismatch(format!(
            "dense layer expects {} inputs, got {}",
            w.inputs(),
            b.dim()
        )));
    }
    let mu_b = b.mean();
    let sigma_b = b.cov();
    let mean = w.means.dot(&mu_b);
    let mut cov = w.means.dot(&sigma_b.dot(&w.means.t()));
    for (h, factor) in w.cov_factors.iter().enumerate() {
        cov[[h, h]] += factor.trace_with(sigma_b) + factor.quad_form(mu_b);
    }
    GaussianVector::new(mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn concat_single_is_identity() {
        let g = GaussianVector::new(array![1.0, 2.0], array![[1.0, 0.5], [0.5, 2.0]]).unwrap();
        assert_eq!(concat_channels(std::slice::from_ref(&g)).unwrap(), g);
        assert!(matches!(concat_channels(&[]), Err(Error::EmptyList)));
    }

    #[test]
    fn concat_two_scalars() {
        let a = GaussianVector::new(array![1.0], array![[0.5]]).unwrap();
        let b = GaussianVector::new(array![-2.0], array![[3.0]]).unwrap();
        let c = concat_channels(&[a, b]).unwrap();
        assert_eq!(c.mean().to_vec(), vec![1.0, -2.0]);
        assert_eq!(c.cov(), array![[0.5, 0.0], [0.0, 3.0]]);
    }

    #[test]
    fn deterministic_reduction() {
        let b = GaussianVector::point(array![1.0, -1.0, 2.0]);
        let w = VariationalDenseWeight::new(
            array![[1.0, 0.0, 1.0], [0.5, 0.5, 0.5]],
            vec![CovFactor::zeros_full(3), CovFactor::Diagonal(Array1::zeros(3))],
        )
        .unwrap();
        let f = dense_forward(&b, &w).unwrap();
        assert!(f.is_point_mass());
        assert_eq!(f.mean().to_vec(), vec![3.0, 1.0]);
    }

    #[test]
    fn scalar_product_variance() {
        let (mb, sb, mw, sw) = (0.7_f64, 0.5_f64, 1.3_f64, 0.2_f64);
        let b = GaussianVector::new(array![mb], array![[sb * sb]]).unwrap();
        let w = VariationalDenseWeight::new(array![[mw]], vec![CovFactor::Full(array![[sw]])]).unwrap();
        let f = dense_forward(&b, &w).unwrap();
        let expected = sw * sw * sb * sb + mw * mw * sb * sb + mb * mb * sw * sw;
        assert!((f.cov()[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn diagonal_entries_nonnegative() {
        let b = GaussianVector::new(array![1.0, -2.0], array![[1.0, 0.9], [0.9, 1.0]]).unwrap();
        let w = VariationalDenseWeight::new(
            array![[1.0, -1.0], [3.0, 0.1], [0.0, 0.0]],
            vec![
                CovFactor::Diagonal(array![0.1, 0.2]),
                CovFactor::Full(array![[0.3, 0.0], [0.1, 0.1]]),
                CovFactor::Diagonal(array![0.0, 0.0]),
            ],
        )
        .unwrap();
        let f = dense_forward(&b, &w).unwrap();
        assert!(f.cov().diag().iter().all(|&v| v >= 0.0));
    }
}
