// SPDX-License-Identifier: Apache-2.0

//! Gaussian random vectors: representation, sampling, moment estimation and
//! the closed-form KL divergence against an isotropic prior.
//!
//! A [`GaussianVector`] is the object handed from layer to layer. Its
//! covariance is symmetrized on construction; positive semi-definiteness is
//! checked by the [`audit`] counters when auditing is switched on.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::NoiseKey;

/// Absolute asymmetry tolerated by [`cholesky`] (scaled by the largest entry).
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;
/// Allowed negative eigenvalue, relative to `trace/d`.
pub const PSD_SLACK: f64 = 1e-8;
/// Jitter multipliers tried in order, each scaled by `trace/d`.
pub const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// Mean vector plus full symmetric covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVector {
    mean: Array1<f64>,
    cov: Array2<f64>,
}

impl GaussianVector {
    pub fn new(mean: Array1<f64>, mut cov: Array2<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {d} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian moments"));
        }
        // asymmetry is measured before symmetrizing so the audit sees what
        // the producing layer actually computed
        let raw_asymmetry = if audit::is_enabled() {
            let magnitude = cov.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            linalg::max_asymmetry(cov.view()) / magnitude
        } else {
            0.0
        };
        linalg::symmetrize(&mut cov);
        let g = Self { mean, cov };
        if audit::is_enabled() {
            audit::record(&g, raw_asymmetry);
        }
        Ok(g)
    }

    /// Point mass at `mean`.
    pub fn point(mean: Array1<f64>) -> Self {
        let d = mean.len();
        Self {
            mean,
            cov: Array2::zeros((d, d)),
        }
    }

    pub fn isotropic(mean: Array1<f64>, variance: f64) -> Self {
        let d = mean.len();
        Self {
            mean,
            cov: Array2::eye(d) * variance,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }

    pub fn cov(&self) -> ArrayView2<'_, f64> {
        self.cov.view()
    }

    pub fn variances(&self) -> Array1<f64> {
        self.cov.diag().to_owned()
    }

    pub fn into_parts(self) -> (Array1<f64>, Array2<f64>) {
        (self.mean, self.cov)
    }

    pub fn is_point_mass(&self) -> bool {
        self.cov.iter().all(|&v| v == 0.0)
    }

    /// Symmetry error and smallest eigenvalue of the covariance.
    pub fn invariant_report(&self) -> InvariantReport {
        let d = self.dim().max(1) as f64;
        let scale = linalg::trace(self.cov.view()).abs() / d;
        InvariantReport {
            asymmetry: linalg::max_asymmetry(self.cov.view()),
            min_eigenvalue: linalg::min_eigenvalue(self.cov.view()),
            eigen_floor: -PSD_SLACK * scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantReport {
    pub asymmetry: f64,
    pub min_eigenvalue: f64,
    /// Smallest admissible eigenvalue, `-1e-8 · trace/d`.
    pub eigen_floor: f64,
}

impl InvariantReport {
    pub fn holds(&self) -> bool {
        self.asymmetry <= SYMMETRY_TOLERANCE && self.min_eigenvalue >= self.eigen_floor
    }
}

/// Process-wide counters for the symmetry/PSD invariant.
///
/// Disabled by default because the eigenvalue check costs O(d³) per vector.
pub mod audit {
    use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

    use super::GaussianVector;

    static ENABLED: AtomicBool = AtomicBool::new(false);
    static CHECKS: AtomicU64 = AtomicU64::new(0);
    static FAILURES: AtomicU64 = AtomicU64::new(0);

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
    pub struct AuditCounts {
        pub checks: u64,
        pub failures: u64,
    }

    pub fn set_enabled(on: bool) {
        ENABLED.store(on, Ordering::SeqCst);
    }

    pub fn is_enabled() -> bool {
        ENABLED.load(Ordering::Relaxed)
    }

    pub fn reset() {
        CHECKS.store(0, Ordering::SeqCst);
        FAILURES.store(0, Ordering::SeqCst);
    }

    pub fn counts() -> AuditCounts {
        AuditCounts {
            checks: CHECKS.load(Ordering::SeqCst),
            failures: FAILURES.load(Ordering::SeqCst),
        }
    }

    pub(super) fn record(g: &GaussianVector, raw_asymmetry: f64) {
        CHECKS.fetch_add(1, Ordering::Relaxed);
        if raw_asymmetry > super::SYMMETRY_TOLERANCE || !g.invariant_report().holds() {
            FAILURES.fetch_add(1, Ordering::Relaxed);
        }
    }
}

/// Gaussian whose covariance is given as `factor · factorᵀ` with a possibly
/// rectangular factor (`d × r`).
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredGaussian {
    pub mean: Array1<f64>,
    pub factor: Array2<f64>,
}

impl FactoredGaussian {
    pub fn new(mean: Array1<f64>, factor: Array2<f64>) -> Result<Self> {
        if factor.nrows() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "factor has {} rows for a mean of length {}",
                factor.nrows(),
                mean.len()
            )));
        }
        Ok(Self { mean, factor })
    }

    pub fn rank_bound(&self) -> usize {
        self.factor.ncols()
    }

    pub fn to_dense(&self) -> Result<GaussianVector> {
        GaussianVector::new(self.mean.clone(), self.factor.dot(&self.factor.t()))
    }

    /// `n` draws `mean + factor·ε_i`, with ε rows from `key` streams.
    pub fn sample(&self, n: usize, key: NoiseKey) -> Result<Ensemble> {
        if n < 2 {
            return Err(Error::EnsembleTooSmall(n));
        }
        let eps = key.normal_matrix(n, self.factor.ncols());
        let mut samples = eps.dot(&self.factor.t());
        samples += &self.mean;
        Ok(Ensemble {
            samples,
            key,
            source_dim: self.mean.len(),
        })
    }
}

/// `N × d` draws with the key they were generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    samples: Array2<f64>,
    key: NoiseKey,
    source_dim: usize,
}

impl Ensemble {
    pub fn from_samples(samples: Array2<f64>, key: NoiseKey) -> Result<Self> {
        if samples.nrows() < 2 {
            return Err(Error::EnsembleTooSmall(samples.nrows()));
        }
        let source_dim = samples.ncols();
        Ok(Self {
            samples,
            key,
            source_dim,
        })
    }

    pub fn samples(&self) -> ArrayView2<'_, f64> {
        self.samples.view()
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn seed(&self) -> u64 {
        self.key.seed
    }

    pub fn key(&self) -> NoiseKey {
        self.key
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    /// Applies `f` to every entry, keeping the key.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Ensemble {
        Ensemble {
            samples: self.samples.mapv(f),
            key: self.key,
            source_dim: self.source_dim,
        }
    }
}

/// Lower Cholesky factor of `cov + jitter_used·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub lower: Array2<f64>,
    pub jitter_used: f64,
}

/// Cholesky factorization with the smallest jitter from [`JITTER_LADDER`]
/// (scaled by `trace/d`) that succeeds.
pub fn cholesky(cov: ArrayView2<'_, f64>) -> Result<CholeskyFactor> {
    let d = cov.nrows();
    if d == 0 || cov.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "cholesky needs a non-empty square matrix, got {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let magnitude = cov.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let asymmetry = linalg::max_asymmetry(cov);
    if asymmetry > SYMMETRY_TOLERANCE * magnitude {
        return Err(Error::NotSymmetric { asymmetry });
    }
    let scale = linalg::trace(cov) / d as f64;
    let mut work = cov.to_owned();
    linalg::symmetrize(&mut work);
    let mut applied = 0.0;
    for &step in &JITTER_LADDER {
        let jitter = step * scale;
        if jitter > 0.0 || step == 0.0 {
            work.diag_mut().mapv_inplace(|v| v + (jitter - applied));
            applied = jitter;
            if let Some(lower) = linalg::cholesky_lower(work.view()) {
                return Ok(CholeskyFactor {
                    lower,
                    jitter_used: jitter,
                });
            }
        }
    }
    Err(Error::NotFactorizable {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] * scale,
    })
}

/// Factor used for sampling: Cholesky with jitter, falling back to an
/// eigenvalue-clipped projection when the whole ladder fails.
fn sampling_factor(cov: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    match cholesky(cov) {
        Ok(f) => Ok(f.lower),
        Err(Error::NotFactorizable { .. }) => {
            let projected = linalg::project_psd(cov);
            Ok(cholesky(projected.view())?.lower)
        }
        Err(e) => Err(e),
    }
}

/// Draws `n` rows `mean + L·ε_i`, ε_i standard normal from stream `i` of `key`.
pub fn sample_ensemble(g: &GaussianVector, n: usize, key: NoiseKey) -> Result<Ensemble> {
    if n < 2 {
        return Err(Error::EnsembleTooSmall(n));
    }
    let d = g.dim();
    let mut samples = Array2::zeros((n, d));
    if !g.is_point_mass() {
        let lower = sampling_factor(g.cov())?;
        let eps = key.normal_matrix(n, d);
        samples = eps.dot(&lower.t());
    }
    samples += &g.mean;
    Ok(Ensemble {
        samples,
        key,
        source_dim: d,
    })
}

/// Sample mean and (N−1)-normalized sample covariance.
pub fn ensemble_moments(e: &Ensemble) -> Result<GaussianVector> {
    moments_of_samples(e.samples())
}

pub(crate) fn moments_of_samples(samples: ArrayView2<'_, f64>) -> Result<GaussianVector> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::EnsembleTooSmall(n));
    }
    let mut mean = samples.mean_axis(Axis(0)).expect("non-empty");
    // a constant column must centre to exact zeros, which the rounded sum
    // does not guarantee
    for (j, col) in samples.columns().into_iter().enumerate() {
        if col.iter().all(|&v| v == col[0]) {
            mean[j] = col[0];
        }
    }
    let centered = &samples - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    GaussianVector::new(mean, cov)
}

/// KL(N(q_mean, q_cov) ‖ N(0, prior_var·I)).
pub fn kl_gaussian_diag_prior(q_mean: ArrayView1<'_, f64>, q_cov: ArrayView2<'_, f64>, prior_var: f64) -> Result<f64> {
    if !(prior_var > 0.0) {
        return Err(Error::NonPositivePriorVariance(prior_var));
    }
    let d = q_mean.len();
    if q_cov.nrows() != d || q_cov.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "kl: mean length {d}, covariance {}x{}",
            q_cov.nrows(),
            q_cov.ncols()
        )));
    }
    let factor = cholesky(q_cov)?;
    let log_det: f64 = 2.0 * factor.lower.diag().iter().map(|v| v.ln()).sum::<f64>();
    let trace = linalg::trace(q_cov);
    let norm_sq = q_mean.dot(&q_mean);
    let d = d as f64;
    Ok(0.5 * (trace / prior_var + norm_sq / prior_var - d + d * prior_var.ln() - log_det))
}

/// Same divergence with the covariance given as `lower·lowerᵀ`.
pub fn kl_from_factor(q_mean: ArrayView1<'_, f64>, lower: ArrayView2<'_, f64>, prior_var: f64) -> Result<f64> {
    if !(prior_var > 0.0) {
        return Err(Error::NonPositivePriorVariance(prior_var));
    }
    let d = q_mean.len() as f64;
    let trace: f64 = lower.iter().map(|v| v * v).sum();
    let log_det: f64 = 2.0 * lower.diag().iter().map(|v| v.abs().ln()).sum::<f64>();
    let norm_sq = q_mean.dot(&q_mean);
    Ok(0.5 * (trace / prior_var + norm_sq / prior_var - d + d * prior_var.ln() - log_det))
}
