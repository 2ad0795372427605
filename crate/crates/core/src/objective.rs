// SPDX-License-Identifier: Apache-2.0

//! Variational free energy: expected negative log-likelihood of the labels
//! under the propagated output distribution, plus the KL divergence of every
//! weight posterior from its prior.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{self, GaussianVector};
use crate::layers::{softmax, CovFactor, VariationalConvKernel, VariationalDenseWeight};

/// Default floor added to every output variance in [`expected_nll`].
pub const DEFAULT_VAR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub kl_scale: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn new(nll: f64, kl: f64, kl_scale: f64) -> Self {
        Self {
            nll,
            kl,
            kl_scale,
            total: nll + kl_scale * kl,
        }
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Heteroscedastic Gaussian NLL of the one-hot target under the diagonal of
/// the softmax output distribution:
/// `½ Σ_k [(t_k − μ_k)²/(Σ_kk + floor) + ln(Σ_kk + floor)]`.
pub fn expected_nll(y: &GaussianVector, label: usize, var_floor: f64) -> Result<f64> {
    nll_from_parts(y.mean(), y.cov().diag(), label, var_floor)
}

pub fn nll_from_parts(
    mean: ArrayView1<'_, f64>,
    variances: ArrayView1<'_, f64>,
    label: usize,
    var_floor: f64,
) -> Result<f64> {
    check_label(label, mean.len())?;
    let mut total = 0.0;
    for (k, (&mu, &v)) in mean.iter().zip(variances.iter()).enumerate() {
        let t = if k == label { 1.0 } else { 0.0 };
        let s = v + var_floor;
        total += (t - mu) * (t - mu) / s + s.ln();
    }
    Ok(0.5 * total)
}

/// Gradient of [`nll_from_parts`] with respect to the mean and the variances.
pub fn nll_grad(
    mean: ArrayView1<'_, f64>,
    variances: ArrayView1<'_, f64>,
    label: usize,
    var_floor: f64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    check_label(label, mean.len())?;
    let k = mean.len();
    let mut d_mean = Array1::zeros(k);
    let mut d_var = Array1::zeros(k);
    for i in 0..k {
        let t = if i == label { 1.0 } else { 0.0 };
        let s = variances[i] + var_floor;
        let r = t - mean[i];
        d_mean[i] = -r / s;
        d_var[i] = 0.5 * (1.0 / s - r * r / (s * s));
    }
    Ok((d_mean, d_var))
}

/// `−ln softmax(logits)[label]`.
pub fn cross_entropy(logits: ArrayView1<'_, f64>, label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Gradient of [`cross_entropy`] with respect to the logits: `softmax − onehot`.
pub fn cross_entropy_grad(logits: ArrayView1<'_, f64>, label: usize) -> Result<Array1<f64>> {
    check_label(label, logits.len())?;
    let mut g = softmax(logits);
    g[label] -= 1.0;
    Ok(g)
}

/// KL(N(mean, L·Lᵀ) ‖ N(0, prior_var·I)).
pub fn kl_factor(mean: ArrayView1<'_, f64>, factor: &CovFactor, prior_var: f64) -> Result<f64> {
    match factor {
        CovFactor::Full(l) => gaussian::kl_from_factor(mean, l.view(), prior_var),
        CovFactor::Diagonal(s) => {
            if !(prior_var > 0.0) {
                return Err(Error::NonPositivePriorVariance(prior_var));
            }
            let ln_p = prior_var.ln();
            let total: f64 = mean
                .iter()
                .zip(s.iter())
                .map(|(&m, &sd)| (sd * sd + m * m) / prior_var - 1.0 + ln_p - 2.0 * sd.abs().ln())
                .sum();
            Ok(0.5 * total)
        }
    }
}

/// Sum of per-kernel and per-neuron KL terms.
pub fn kl_total(kernels: &[VariationalConvKernel], dense: &[VariationalDenseWeight], prior_var: f64) -> Result<f64> {
    let mut total = 0.0;
    for k in kernels {
        total += kl_factor(k.mean.view(), &k.cov_factor, prior_var)?;
    }
    for w in dense {
        for (m, f) in w.means.rows().into_iter().zip(&w.cov_factors) {
            total += kl_factor(m, f, prior_var)?;
        }
    }
    Ok(total)
}

/// Batch-mean expected NLL plus `kl_scale` times the summed KL.
#[allow(clippy::too_many_arguments)]
pub fn total_objective(
    outputs: &[GaussianVector],
    labels: &[usize],
    kernels: &[VariationalConvKernel],
    dense: &[VariationalDenseWeight],
    prior_var: f64,
    kl_scale: f64,
    var_floor: f64,
) -> Result<ElboBreakdown> {
    if outputs.is_empty() || outputs.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} outputs for {} labels",
            outputs.len(),
            labels.len()
        )));
    }
    let mut nll = 0.0;
    for (y, &label) in outputs.iter().zip(labels) {
        nll += expected_nll(y, label, var_floor)?;
    }
    nll /= outputs.len() as f64;
    let kl = kl_total(kernels, dense, prior_var)?;
    Ok(ElboBreakdown::new(nll, kl, kl_scale))
}
