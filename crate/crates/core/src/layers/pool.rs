// SPDX-License-Identifier: Apache-2.0

//! Max-pooling of a Gaussian feature map.
//!
//! The kept position in each window is the argmax of the *mean* map (ties go
//! to the lowest flat index). The output mean gathers those entries and the
//! output covariance is the principal submatrix on the same index set.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::gaussian::GaussianVector;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolPlan {
    /// One flat pre-pool index per window, windows in row-major order.
    pub kept_indices: Vec<usize>,
    pub patch: usize,
    pub stride: usize,
    pub in_height: usize,
    pub in_width: usize,
}

impl PoolPlan {
    pub fn out_height(&self) -> usize {
        (self.in_height - self.patch) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width - self.patch) / self.stride + 1
    }
}

/// `(d − p)/s + 1`, or an error when the window does not tile the input.
pub fn pooled_side(side: usize, patch: usize, stride: usize) -> Result<usize> {
    if patch == 0 || stride == 0 || side < patch || !(side - patch).is_multiple_of(stride) {
        return Err(Error::GeometryMismatch(format!(
            "pool patch {patch} stride {stride} does not tile side {side}"
        )));
    }
    Ok((side - patch) / stride + 1)
}

/// Window argmax plan for a `height × width` map flattened row-major.
pub fn plan_pool(
    mean: ArrayView1<'_, f64>,
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
) -> Result<PoolPlan> {
    if mean.len() != height * width {
        return Err(Error::GeometryMismatch(format!(
            "map of length {} is not {height}x{width}",
            mean.len()
        )));
    }
    let oh = pooled_side(height, patch, stride)?;
    let ow = pooled_side(width, patch, stride)?;
    let mut kept_indices = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut best = (oy * stride) * width + ox * stride;
            // row-major scan order visits flat indices in increasing order,
            // so a strict `>` keeps the lowest index on ties
            for dy in 0..patch {
                for dx in 0..patch {
                    let idx = (oy * stride + dy) * width + ox * stride + dx;
                    if mean[idx] > mean[best] {
                        best = idx;
                    }
                }
            }
            kept_indices.push(best);
        }
    }
    Ok(PoolPlan {
        kept_indices,
        patch,
        stride,
        in_height: height,
        in_width: width,
    })
}

pub fn gather(values: ArrayView1<'_, f64>, plan: &PoolPlan) -> Array1<f64> {
    plan.kept_indices.iter().map(|&i| values[i]).collect()
}

/// Max-pool moments for a square `d₁ × d₁` map.
pub fn maxpool_moments(g: &GaussianVector, patch: usize, stride: usize) -> Result<(GaussianVector, PoolPlan)> {
    let side = (g.dim() as f64).sqrt().round() as usize;
    if side * side != g.dim() {
        return Err(Error::GeometryMismatch(format!(
            "feature map of length {} is not square",
            g.dim()
        )));
    }
    maxpool_moments_rect(g, side, side, patch, stride)
}

pub fn maxpool_moments_rect(
    g: &GaussianVector,
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
) -> Result<(GaussianVector, PoolPlan)> {
    let plan = plan_pool(g.mean(), height, width, patch, stride)?;
    let idx = &plan.kept_indices;
    let mean = gather(g.mean(), &plan);
    let src = g.cov();
    let cov = Array2::from_shape_fn((idx.len(), idx.len()), |(a, b)| src[[idx[a], idx[b]]]);
    Ok((GaussianVector::new(mean, cov)?, plan))
}
