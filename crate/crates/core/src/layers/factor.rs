// SPDX-License-Identifier: Apache-2.0

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Lower-triangular covariance factor `L` with `Σ = L·Lᵀ`.
///
/// `Diagonal` stores only the diagonal of `L` (the per-coordinate standard
/// deviations); it is used where a full factor would not fit in memory.
#[derive(Debug, Clone, PartialEq)]
pub enum CovFactor {
    Full(Array2<f64>),
    Diagonal(Array1<f64>),
}

impl CovFactor {
    pub fn zeros_full(d: usize) -> Self {
        CovFactor::Full(Array2::zeros((d, d)))
    }

    pub fn dim(&self) -> usize {
        match self {
            CovFactor::Full(l) => l.nrows(),
            CovFactor::Diagonal(s) => s.len(),
        }
    }

    pub fn lower(&self) -> Array2<f64> {
        match self {
            CovFactor::Full(l) => l.clone(),
            CovFactor::Diagonal(s) => Array2::from_diag(s),
        }
    }

    pub fn covariance(&self) -> Array2<f64> {
        match self {
            CovFactor::Full(l) => l.dot(&l.t()),
            CovFactor::Diagonal(s) => Array2::from_diag(&s.mapv(|v| v * v)),
        }
    }

    /// `vᵀ Σ v`.
    pub fn quad_form(&self, v: ArrayView1<'_, f64>) -> f64 {
        match self {
            CovFactor::Full(l) => {
                let u = l.t().dot(&v);
                u.dot(&u)
            }
            CovFactor::Diagonal(s) => s.iter().zip(v.iter()).map(|(s, v)| s * s * v * v).sum(),
        }
    }

    /// `uᵀ Σ v`.
    pub fn bilinear(&self, u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
        match self {
            CovFactor::Full(l) => l.t().dot(&u).dot(&l.t().dot(&v)),
            CovFactor::Diagonal(s) => s
                .iter()
                .zip(u.iter().zip(v.iter()))
                .map(|(s, (u, v))| s * s * u * v)
                .sum(),
        }
    }

    /// `tr(Σ · other)` for a symmetric `other`.
    pub fn trace_with(&self, other: ArrayView2<'_, f64>) -> f64 {
        match self {
            CovFactor::Full(l) => {
                let ol = other.dot(l);
                (&ol * l).sum()
            }
            CovFactor::Diagonal(s) => s.iter().zip(other.diag().iter()).map(|(s, o)| s * s * o).sum(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            CovFactor::Full(l) => l.iter().all(|&v| v == 0.0),
            CovFactor::Diagonal(s) => s.iter().all(|&v| v == 0.0),
        }
    }
}
