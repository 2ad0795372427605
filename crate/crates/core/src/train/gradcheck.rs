// SPDX-License-Identifier: Apache-2.0

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{objective_and_grad, ObjectiveSettings};
use crate::data::Dataset;
use crate::error::Result;
use crate::network::Model;
use crate::rng::NoiseKey;

pub const CHECKED_COORDINATES: usize = 100;
/// Relative step of the central differences.
pub const FD_STEP: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic gradient of the batch objective against central
/// differences on up to 100 coordinates picked by `seed`, with the ensemble
/// noise frozen at `(seed, step 0)`.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn check_gradients(
    model: &Model,
    ds: &Dataset,
    batch: &[usize],
    settings: &ObjectiveSettings,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, grad) = objective_and_grad(model, ds, batch, seed, 0, settings, true)?;
    let grad = grad.expect("requested");
    let n = model.num_params();
    let k = CHECKED_COORDINATES.min(n);
    let mut rng = NoiseKey::new(seed, u32::MAX - 2, 0, 0).stream(0);
    let mut coords = sample(&mut rng, n, k).into_vec();
    coords.sort_unstable();
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        coordinates: k,
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        tolerance,
        passed: true,
    };
    for &i in &coords {
        let theta = model.params()[i];
        let h = FD_STEP * theta.abs().max(1.0);
        probe.params_mut()[i] = theta + h;
        let up = objective_and_grad(&probe, ds, batch, seed, 0, settings, false)?.0.total;
        probe.params_mut()[i] = theta - h;
        let down = objective_and_grad(&probe, ds, batch, seed, 0, settings, false)?.0.total;
        probe.params_mut()[i] = theta;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}
