// SPDX-License-Identifier: Apache-2.0

//! Test-time corruptions and attacks, and evaluation under them.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{eval_key, forward_backward, LossKind, Model, Want};
use crate::objective::DEFAULT_VAR_FLOOR;
use crate::rng::NoiseKey;

/// Layer index keying corruption noise, away from any network layer.
const CORRUPTION_LAYER: u32 = u32::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Gaussian,
    FgsmTargeted,
}

/// One test condition. `level` is σ² for Gaussian noise and ε for FGSM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub level: f64,
    #[serde(default)]
    pub target_class: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    pub fn gaussian(sigma_sq: f64, seed: u64) -> Self {
        Self {
            kind: AttackKind::Gaussian,
            level: sigma_sq,
            target_class: None,
            seed,
        }
    }

    pub fn fgsm(epsilon: f64, target_class: usize, seed: u64) -> Self {
        Self {
            kind: AttackKind::FgsmTargeted,
            level: epsilon,
            target_class: Some(target_class),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level >= 0.0) || !self.level.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "attack level must be >= 0, got {}",
                self.level
            )));
        }
        if self.kind == AttackKind::FgsmTargeted && self.target_class.is_none() {
            return Err(Error::InvalidConfig("targeted FGSM needs a target class".into()));
        }
        Ok(())
    }

    /// Column name, e.g. `gaussian_0.1` or `fgsm_0.2`.
    pub fn name(&self) -> String {
        match self.kind {
            AttackKind::Gaussian => format!("gaussian_{}", self.level),
            AttackKind::FgsmTargeted => format!("fgsm_{}", self.level),
        }
    }
}

/// `len` i.i.d. `N(0, sigma_sq)` draws.
pub fn gaussian_noise(len: usize, sigma_sq: f64, key: NoiseKey) -> Result<Vec<f64>> {
    if !(sigma_sq >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise variance must be >= 0, got {sigma_sq}"
        )));
    }
    let sigma = sigma_sq.sqrt();
    let mut rng = key.stream(0);
    Ok((0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            sigma * e
        })
        .collect())
}

/// Adds `N(0, sigma_sq)` noise per pixel and clamps to `[0, 1]`.
pub fn gaussian_corrupt(image: &[f64], sigma_sq: f64, key: NoiseKey) -> Result<Vec<f64>> {
    if sigma_sq == 0.0 {
        return Ok(image.to_vec());
    }
    let noise = gaussian_noise(image.len(), sigma_sq, key)?;
    Ok(image.iter().zip(noise).map(|(x, e)| (x + e).clamp(0.0, 1.0)).collect())
}

/// σ with `3σ = fraction · pixel_max`.
pub fn hcv_sigma(fraction: f64, pixel_max: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) || !(pixel_max > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "hcv needs fraction in (0, 1] and positive pixel max, got {fraction}, {pixel_max}"
        )));
    }
    Ok(fraction * pixel_max / 3.0)
}

/// `clamp(x − ε·sign(∇ₓ L_target))`, the gradient taken through one forward
/// pass with the ensemble noise fixed by `key`. The loss is the model's own
/// training likelihood (Gaussian NLL for EnDP, cross-entropy for the
/// baseline) evaluated at the target label.
pub fn fgsm_targeted(
    model: &Model,
    image: &[f64],
    target_class: usize,
    epsilon: f64,
    key: NoiseKey,
) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(image.to_vec());
    }
    let grad = input_gradient(model, image, target_class, key)?;
    Ok(fgsm_step(image, &grad, epsilon))
}

/// Gradient of the target-class loss with respect to the image.
pub fn input_gradient(model: &Model, image: &[f64], target_class: usize, key: NoiseKey) -> Result<Vec<f64>> {
    let out = forward_backward(
        model,
        image,
        target_class,
        key,
        LossKind::default_for(model.kind()),
        DEFAULT_VAR_FLOOR,
        Want::INPUT,
    )?;
    let grad = out.input_grad.expect("requested");
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { step: 0 });
    }
    Ok(grad)
}

/// The textbook targeted update on a given gradient.
pub fn fgsm_step(image: &[f64], grad: &[f64], epsilon: f64) -> Vec<f64> {
    image
        .iter()
        .zip(grad)
        .map(|(&x, &g)| {
            let step = if g > 0.0 {
                epsilon
            } else if g < 0.0 {
                -epsilon
            } else {
                0.0
            };
            (x - step).clamp(0.0, 1.0)
        })
        .collect()
}

/// Perturbed copy of example `index` under `condition`.
pub fn perturb(model: &Model, image: &[f64], index: u64, condition: &AttackConfig, eval_seed: u64) -> Result<Vec<f64>> {
    condition.validate()?;
    match condition.kind {
        AttackKind::Gaussian => gaussian_corrupt(
            image,
            condition.level,
            NoiseKey::new(condition.seed, CORRUPTION_LAYER, 0, index),
        ),
        AttackKind::FgsmTargeted => fgsm_targeted(
            model,
            image,
            condition.target_class.expect("validated"),
            condition.level,
            eval_key(eval_seed, index),
        ),
    }
}

/// Accuracy and uncertainty summary of one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub count: usize,
    pub accuracy: f64,
    /// Mean variance of the predicted class over correct predictions.
    pub var_correct: Option<f64>,
    /// Same over incorrect predictions.
    pub var_incorrect: Option<f64>,
    /// Fraction of non-target images classified as the target.
    pub target_hit_rate: Option<f64>,
}

struct Outcome {
    correct: bool,
    variance: f64,
    hit: Option<bool>,
}

/// Evaluates `model` on `ds`, clean when `condition` is `None`. Example `i`
/// uses the evaluation noise key `(eval_seed, i)`.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    condition: Option<&AttackConfig>,
    eval_seed: u64,
) -> Result<ConditionReport> {
    if ds.is_empty() {
        return Err(Error::InvalidConfig("evaluation set is empty".into()));
    }
    let target = condition.and_then(|c| c.target_class);
    let outcomes: Vec<Outcome> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let image = match condition {
                None => ds.image(i).to_vec(),
                Some(c) => perturb(model, ds.image(i), i as u64, c, eval_seed)?,
            };
            let p = model.predict(&image, eval_key(eval_seed, i as u64))?;
            let class = p.class();
            let label = ds.label(i);
            Ok(Outcome {
                correct: class == label,
                variance: p.variance(class),
                hit: target.filter(|&t| t != label).map(|t| class == t),
            })
        })
        .collect::<Result<_>>()?;
    let mean_of = |pick: bool| {
        let v: Vec<f64> = outcomes
            .iter()
            .filter(|o| o.correct == pick)
            .map(|o| o.variance)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let hits: Vec<bool> = outcomes.iter().filter_map(|o| o.hit).collect();
    Ok(ConditionReport {
        name: condition.map_or_else(|| "clean".to_string(), AttackConfig::name),
        count: outcomes.len(),
        accuracy: outcomes.iter().filter(|o| o.correct).count() as f64 / outcomes.len() as f64,
        var_correct: mean_of(true),
        var_incorrect: mean_of(false),
        target_hit_rate: (!hits.is_empty()).then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hcv_examples() {
        assert!((hcv_sigma(0.05, 1.0).unwrap() - 0.016_666_666_666_666_67).abs() < 1e-15);
        assert!((hcv_sigma(1.0, 1.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((hcv_sigma(0.05, 255.0).unwrap() - 4.25).abs() < 1e-12);
        assert!(hcv_sigma(0.0, 1.0).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let img = vec![0.1, 0.5, 0.9];
        assert_eq!(gaussian_corrupt(&img, 0.0, NoiseKey::from_seed(1)).unwrap(), img);
        assert!(gaussian_corrupt(&img, -1.0, NoiseKey::from_seed(1)).is_err());
    }

    #[test]
    fn fgsm_step_bounds() {
        let img = vec![0.0, 0.5, 1.0, 0.3];
        let grad = vec![1.0, -2.0, 0.0, 1e-30];
        let adv = fgsm_step(&img, &grad, 0.2);
        assert_eq!(adv, vec![0.0, 0.7, 1.0, 0.3 - 0.2]);
    }

    #[test]
    fn attack_validation() {
        let mut c = AttackConfig::fgsm(0.1, 3, 0);
        assert!(c.validate().is_ok());
        c.target_class = None;
        assert!(c.validate().is_err());
        assert!(AttackConfig::gaussian(-0.1, 0).validate().is_err());
        assert_eq!(AttackConfig::gaussian(0.1, 0).name(), "gaussian_0.1");
    }
}
