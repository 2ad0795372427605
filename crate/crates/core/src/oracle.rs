// SPDX-License-Identifier: Apache-2.0

//! Brute-force Monte-Carlo moment estimation.
//!
//! This module is the reference the analytic propagation rules are tested
//! against, so it deliberately shares no code with [`crate::layers`]: the
//! caller supplies a sampler that produces one output vector per draw
//! (typically by sampling inputs and weights and multiplying them out
//! directly), and the oracle accumulates mean and covariance.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::GaussianVector;
use crate::linalg;

pub const MIN_DRAWS: usize = 10_000;
const BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub mean_rel_err: f64,
    pub cov_rel_err: f64,
    pub dim: usize,
}

impl OracleReport {
    /// Tolerance actually applied: doubled above 50 dimensions.
    pub fn effective_tolerance(&self, tol: f64) -> f64 {
        if self.dim > 50 {
            2.0 * tol
        } else {
            tol
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        let t = self.effective_tolerance(tol);
        self.mean_rel_err <= t && self.cov_rel_err <= t
    }
}

/// Running (count, mean, scatter) triple.
struct Partial {
    n: f64,
    mean: Array1<f64>,
    scatter: Array2<f64>,
}

impl Partial {
    fn merge(a: Partial, b: Partial) -> Partial {
        let n = a.n + b.n;
        let delta = &b.mean - &a.mean;
        let mean = &a.mean + &(&delta * (b.n / n));
        let w = a.n * b.n / n;
        let d = delta.len();
        let mut scatter = a.scatter + b.scatter;
        for i in 0..d {
            for j in 0..d {
                scatter[[i, j]] += w * delta[i] * delta[j];
            }
        }
        Partial { n, mean, scatter }
    }
}

/// Empirical mean and (N−1)-normalized covariance of `draws` outputs of
/// `sampler`, which writes one `dim`-vector per call.
///
/// Draws are split into fixed blocks, each with its own ChaCha stream, and
/// block statistics are merged pairwise, so the estimate is identical for a
/// given seed regardless of thread count.
pub fn mc_moments<F>(sampler: F, dim: usize, draws: usize, seed: u64) -> Result<GaussianVector>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    if draws < MIN_DRAWS {
        return Err(Error::InvalidConfig(format!(
            "oracle needs at least {MIN_DRAWS} draws, got {draws}"
        )));
    }
    let blocks = draws.div_ceil(BLOCK);
    let partials: Vec<Partial> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let count = BLOCK.min(draws - b * BLOCK);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut rows = Array2::<f64>::zeros((count, dim));
            for mut row in rows.rows_mut() {
                sampler(&mut rng, row.as_slice_mut().expect("standard layout"));
            }
            let mean = rows.mean_axis(ndarray::Axis(0)).expect("non-empty block");
            let centered = &rows - &mean;
            Partial {
                n: count as f64,
                mean,
                scatter: centered.t().dot(&centered),
            }
        })
        .collect();
    let mut level = partials;
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(Partial::merge(a, b)),
                None => next.push(a),
            }
        }
        level = next;
    }
    let total = level.pop().expect("at least one block");
    let cov = total.scatter / (total.n - 1.0);
    GaussianVector::new(total.mean, cov)
}

/// Relative mean and Frobenius covariance errors of `analytic` against `oracle`.
pub fn compare_layer(analytic: &GaussianVector, oracle: &GaussianVector) -> Result<OracleReport> {
    if analytic.dim() != oracle.dim() {
        return Err(Error::DimensionMismatch(format!(
            "analytic dimension {} vs oracle dimension {}",
            analytic.dim(),
            oracle.dim()
        )));
    }
    let mean_diff = &analytic.mean() - &oracle.mean();
    let mean_rel_err = mean_diff.dot(&mean_diff).sqrt() / oracle.mean().dot(&oracle.mean()).sqrt().max(1e-12);
    let cov_diff = &analytic.cov() - &oracle.cov();
    let cov_rel_err = linalg::frobenius(cov_diff.view()) / linalg::frobenius(oracle.cov()).max(1e-12);
    Ok(OracleReport {
        mean_rel_err,
        cov_rel_err,
        dim: oracle.dim(),
    })
}
