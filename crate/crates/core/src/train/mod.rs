// SPDX-License-Identifier: Apache-2.0

//! Minimizing the variational free energy.
//!
//! Each step draws fresh ensemble noise addressed by `(seed, step, example)`,
//! holds it fixed, and differentiates the batch objective exactly. Batch
//! elements run in parallel; their gradients are summed in batch order so a
//! run is reproducible bit for bit regardless of thread count.

pub mod checkpoint;
pub mod gradcheck;
pub mod optimizer;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use gradcheck::{check_gradients, GradCheckReport};
pub use optimizer::{Optimizer, OptimizerKind};

use crate::data::{epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::network::{forward_backward, LossKind, Model, ModelKind, Want};
use crate::objective::{ElboBreakdown, DEFAULT_VAR_FLOOR};
use crate::rng::NoiseKey;

fn default_prior_var() -> f64 {
    1.0
}

fn default_var_floor() -> f64 {
    DEFAULT_VAR_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    /// Per-activation-layer ensemble sizes; a single entry applies to all.
    /// `None` keeps the spec's sizes.
    #[serde(default)]
    pub ensemble: Option<Vec<usize>>,
    /// Weight of the KL term; `None` means 1 / training-set size.
    #[serde(default)]
    pub kl_scale: Option<f64>,
    #[serde(default = "default_prior_var")]
    pub prior_var: f64,
    #[serde(default = "default_var_floor")]
    pub var_floor: f64,
    /// `None` picks the model kind's default.
    #[serde(default)]
    pub loss: Option<LossKind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            ensemble: None,
            kl_scale: None,
            prior_var: default_prior_var(),
            var_floor: default_var_floor(),
            loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.prior_var > 0.0) {
            return Err(Error::NonPositivePriorVariance(self.prior_var));
        }
        if !(self.var_floor > 0.0) {
            return bad(format!("var_floor must be positive, got {}", self.var_floor));
        }
        if let Some(s) = self.kl_scale {
            if !(s >= 0.0) {
                return bad(format!("kl_scale must be >= 0, got {s}"));
            }
        }
        if let Some(sizes) = &self.ensemble {
            if sizes.is_empty() || sizes.iter().any(|&n| n < 2) {
                return bad("ensemble sizes must be at least 2".into());
            }
        }
        Ok(())
    }

    pub fn settings(&self, model: &Model, train_size: usize) -> ObjectiveSettings {
        ObjectiveSettings {
            loss: self.loss.unwrap_or_else(|| LossKind::default_for(model.kind())),
            var_floor: self.var_floor,
            prior_var: self.prior_var,
            kl_scale: self.kl_scale.unwrap_or(1.0 / train_size.max(1) as f64),
        }
    }
}

/// Everything that defines the per-batch objective besides the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub loss: LossKind,
    pub var_floor: f64,
    pub prior_var: f64,
    pub kl_scale: f64,
}

/// Noise key of example `id` at training step `step`.
pub fn step_key(seed: u64, step: u64, id: u64) -> NoiseKey {
    NoiseKey::new(seed, 0, step, id)
}

/// Batch objective and, optionally, its gradient. Example `i` of `ds` draws
/// its noise from `step_key(seed, step, i)`.
pub fn objective_and_grad(
    model: &Model,
    ds: &Dataset,
    batch: &[usize],
    seed: u64,
    step: u64,
    settings: &ObjectiveSettings,
    with_grad: bool,
) -> Result<(ElboBreakdown, Option<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let want = if with_grad { Want::PARAMS } else { Want::NONE };
    let outputs = batch
        .par_iter()
        .map(|&i| {
            forward_backward(
                model,
                ds.image(i),
                ds.label(i),
                step_key(seed, step, i as u64),
                settings.loss,
                settings.var_floor,
                want,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let nll = outputs.iter().map(|o| o.loss).sum::<f64>() * scale;
    let endp = model.kind() == ModelKind::Endp;
    let kl = if endp { model.kl(settings.prior_var)? } else { 0.0 };
    let grad = with_grad.then(|| {
        let mut g = vec![0.0; model.num_params()];
        for o in &outputs {
            let pg = o.param_grad.as_ref().expect("requested");
            for (a, b) in g.iter_mut().zip(pg) {
                *a += b;
            }
        }
        g.iter_mut().for_each(|v| *v *= scale);
        if endp {
            model.kl_grad(settings.prior_var, settings.kl_scale, &mut g);
        }
        g
    });
    Ok((ElboBreakdown::new(nll, kl, settings.kl_scale), grad))
}

/// One optimizer update on `batch`; returns the objective before the update.
#[allow(clippy::too_many_arguments)]
pub fn grad_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    ds: &Dataset,
    batch: &[usize],
    seed: u64,
    step: u64,
    settings: &ObjectiveSettings,
    learning_rate: f64,
) -> Result<ElboBreakdown> {
    let (elbo, grad) = objective_and_grad(model, ds, batch, seed, step, settings, true)?;
    let grad = grad.expect("requested");
    if grad.iter().any(|g| !g.is_finite()) || !elbo.total.is_finite() {
        return Err(Error::NonFiniteGradient { step });
    }
    optimizer.step(model.params_mut(), &grad, learning_rate);
    Ok(elbo)
}

/// One row of training output. Evaluation fields are filled by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub seed: u64,
    pub epoch: u64,
    pub nll: f64,
    pub kl: f64,
    pub kl_scale: f64,
    pub total: f64,
    pub clean_accuracy: Option<f64>,
    /// `(condition name, accuracy)` in configuration order.
    pub conditions: Vec<(String, f64)>,
    pub var_correct: Option<f64>,
    pub var_incorrect: Option<f64>,
    pub epoch_seconds: f64,
}

/// Training loop state: model, optimizer, and the counters that address
/// all randomness.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    pub step: u64,
}

impl Trainer {
    pub fn new(mut model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if let Some(sizes) = &config.ensemble {
            model.set_ensemble(sizes)?;
        }
        if !model.is_trainable() {
            return Err(Error::Unsupported(
                "training supports conv → activation → [maxpool] → dense networks".into(),
            ));
        }
        let optimizer = Optimizer::new(config.optimizer, model.num_params());
        Ok(Self {
            model,
            optimizer,
            config,
            epoch: 0,
            step: 0,
        })
    }

    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if ckpt.seed != config.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {} differs from configured seed {}",
                ckpt.seed, config.seed
            )));
        }
        if ckpt.optimizer.kind != config.optimizer {
            return Err(Error::Checkpoint(
                "checkpoint optimizer differs from configuration".into(),
            ));
        }
        Ok(Self {
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            config,
            epoch: ckpt.epoch,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            step: self.step,
            seed: self.config.seed,
        }
    }

    /// Runs the next epoch and returns its size-weighted mean objective and
    /// wall time in seconds.
    pub fn run_epoch(&mut self, ds: &Dataset) -> Result<(ElboBreakdown, f64)> {
        if ds.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        let settings = self.config.settings(&self.model, ds.len());
        let start = Instant::now();
        let (mut nll, mut kl) = (0.0, 0.0);
        let batches = epoch_batches(ds.len(), self.config.batch_size, self.config.seed, self.epoch);
        for batch in &batches {
            let e = grad_step(
                &mut self.model,
                &mut self.optimizer,
                ds,
                batch,
                self.config.seed,
                self.step,
                &settings,
                self.config.learning_rate,
            )?;
            self.step += 1;
            let w = batch.len() as f64 / ds.len() as f64;
            nll += w * e.nll;
            kl += w * e.kl;
        }
        self.epoch += 1;
        let seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        Ok((ElboBreakdown::new(nll, kl, settings.kl_scale), seconds))
    }
}

/// Where `train` writes checkpoints: `epoch-NNNN.ckpt` per epoch and
/// `last.ckpt` for the latest.
pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch-{epoch:04}.ckpt"))
}

/// Trains for the configured epochs, checkpointing after each epoch when
/// `checkpoint_dir` is given, and calls `on_epoch` to let the caller fill
/// evaluation fields of the record.
pub fn train_with<F>(
    trainer: &mut Trainer,
    ds: &Dataset,
    run_id: &str,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: F,
) -> Result<Vec<ExperimentRecord>>
where
    F: FnMut(&Model, &mut ExperimentRecord) -> Result<()>,
{
    let mut records = Vec::new();
    while trainer.epoch < trainer.config.epochs as u64 {
        let (elbo, seconds) = trainer.run_epoch(ds)?;
        if let Some(dir) = checkpoint_dir {
            let ckpt = trainer.checkpoint();
            ckpt.save(&checkpoint_path(dir, trainer.epoch))?;
            ckpt.save(&dir.join("last.ckpt"))?;
        }
        let mut record = ExperimentRecord {
            run_id: run_id.to_string(),
            seed: trainer.config.seed,
            epoch: trainer.epoch,
            nll: elbo.nll,
            kl: elbo.kl,
            kl_scale: elbo.kl_scale,
            total: elbo.total,
            clean_accuracy: None,
            conditions: Vec::new(),
            var_correct: None,
            var_incorrect: None,
            epoch_seconds: seconds,
        };
        on_epoch(&trainer.model, &mut record)?;
        records.push(record);
    }
    Ok(records)
}

/// `train_with` from a fresh trainer and no evaluation.
pub fn train(model: Model, ds: &Dataset, config: &TrainConfig) -> Result<(Model, Vec<ExperimentRecord>)> {
    if ds.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let records = train_with(&mut trainer, ds, "train", None, |_, _| Ok(()))?;
    Ok((trainer.model, records))
}
