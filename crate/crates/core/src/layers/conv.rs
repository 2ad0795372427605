// SPDX-License-Identifier: Apache-2.0

//! Convolution with Gaussian kernels.
//!
//! With a deterministic input the output is exactly Gaussian:
//! `z ~ N(X·m, X·Σ·Xᵀ)`. With a random input (deeper layers) the output
//! moments follow the product-of-independent-random-vectors identities,
//! applied to every pair of patch rows.

use ndarray::{s, Array1, Array2, ArrayView1};

use super::factor::CovFactor;
use super::im2col::{ConvGeometry, PatchMatrix};
use crate::error::{Error, Result};
use crate::gaussian::{FactoredGaussian, GaussianVector};

/// One convolutional kernel with `vec(W) ~ N(mean, L·Lᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalConvKernel {
    pub mean: Array1<f64>,
    pub cov_factor: CovFactor,
}

impl VariationalConvKernel {
    pub fn new(mean: Array1<f64>, cov_factor: CovFactor) -> Result<Self> {
        if cov_factor.dim() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "kernel mean has length {} but factor is {}-dimensional",
                mean.len(),
                cov_factor.dim()
            )));
        }
        Ok(Self { mean, cov_factor })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn covariance(&self) -> Array2<f64> {
        self.cov_factor.covariance()
    }
}

fn check_columns(x: &PatchMatrix, kernel: &VariationalConvKernel) -> Result<()> {
    if x.x.ncols() != kernel.len() {
        return Err(Error::DimensionMismatch(format!(
            "patch length {} vs kernel length {}",
            x.x.ncols(),
            kernel.len()
        )));
    }
    Ok(())
}

/// `N(X·m, X·Σ·Xᵀ)` for a deterministic patch matrix.
pub fn conv_forward(x: &PatchMatrix, kernel: &VariationalConvKernel) -> Result<GaussianVector> {
    check_columns(x, kernel)?;
    let mean = x.x.dot(&kernel.mean);
    let xl = x.x.dot(&kernel.cov_factor.lower());
    GaussianVector::new(mean, xl.dot(&xl.t()))
}

/// Same distribution as [`conv_forward`], kept in factored form
/// `N(X·m, (X·L)(X·L)ᵀ)` so that sampling needs no factorization.
pub fn conv_forward_factored(x: &PatchMatrix, kernel: &VariationalConvKernel) -> Result<FactoredGaussian> {
    check_columns(x, kernel)?;
    let mean = x.x.dot(&kernel.mean);
    FactoredGaussian::new(mean, x.x.dot(&kernel.cov_factor.lower()))
}

/// Gathers the joint distribution of all patch vectors from a Gaussian over
/// a flattened `c, y, x` input. The result has dimension `positions·patch_len`,
/// ordered by position then patch entry; overlapping patches share entries
/// and therefore covariance.
pub fn gather_patches(input: &GaussianVector, geometry: ConvGeometry) -> Result<GaussianVector> {
    if input.dim() != geometry.input_len() {
        return Err(Error::DimensionMismatch(format!(
            "input has dimension {} but geometry expects {}",
            input.dim(),
            geometry.input_len()
        )));
    }
    let p = geometry.patch_len();
    let index: Vec<usize> = (0..geometry.positions() * p)
        .map(|t| geometry.input_index(t / p, t % p))
        .collect();
    let mean: Array1<f64> = index.iter().map(|&i| input.mean()[i]).collect();
    let src = input.cov();
    let cov = Array2::from_shape_fn((index.len(), index.len()), |(a, b)| src[[index[a], index[b]]]);
    GaussianVector::new(mean, cov)
}

/// Output moments of `z_i = x_iᵀ w` for a random patch stack `x` independent
/// of the kernel `w`.
///
/// `mean_i = x̄_iᵀm`, and for every pair of positions
/// `cov_ij = mᵀΣx_ij m + x̄_iᵀΣw x̄_j + tr(Σw Σx_ij)`.
pub fn conv_forward_random_input(patches: &GaussianVector, kernel: &VariationalConvKernel) -> Result<GaussianVector> {
    let p = kernel.len();
    if p == 0 || !patches.dim().is_multiple_of(p) {
        return Err(Error::DimensionMismatch(format!(
            "patch stack of dimension {} is not a multiple of kernel length {p}",
            patches.dim()
        )));
    }
    let positions = patches.dim() / p;
    let xbar = patches
        .mean()
        .to_owned()
        .into_shape_with_order((positions, p))
        .expect("divisible");
    let m = kernel.mean.view();
    let sigma_w = kernel.covariance();
    let sigma_x = patches.cov();

    let mean = xbar.dot(&m);
    let mut cov = xbar.dot(&sigma_w).dot(&xbar.t());
    for i in 0..positions {
        for j in i..positions {
            let block = sigma_x.slice(s![i * p..(i + 1) * p, j * p..(j + 1) * p]);
            let weight_term = m.dot(&block.dot(&m));
            // tr(Σw · Σx_ij) = Σ_ab Σw[a,b] · Σx_ij[b,a]
            let trace_term: f64 = (&sigma_w * &block.t()).sum();
            let v = weight_term + trace_term;
            cov[[i, j]] += v;
            if i != j {
                cov[[j, i]] += v;
            }
        }
    }
    GaussianVector::new(mean, cov)
}

/// Deterministic output of a fixed kernel, `X·w`.
pub fn conv_point(x: &PatchMatrix, weights: ArrayView1<'_, f64>) -> Array1<f64> {
    x.x.dot(&weights)
}
