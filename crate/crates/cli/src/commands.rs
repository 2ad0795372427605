// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use endp::data::Dataset;
use endp::network::{eval_key, forward_backward, LossKind, Model, ModelKind, Want};
use endp::robustness::{evaluate, perturb, AttackConfig, AttackKind};
use endp::train::{check_gradients, train_with, Checkpoint, ExperimentRecord, GradCheckReport, Trainer};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::records::{write_atomic, write_json, write_records, write_rows, AttackRow, SweepRow};

/// Command-line values that take precedence over the configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut Config) {
        if let Some(seed) = self.seed {
            cfg.training.seed = seed;
        }
    }

    pub fn out_dir(&self, cfg: &Config) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.experiment.out.clone())
            .unwrap_or_else(|| Path::new("runs").join(&cfg.experiment.name))
    }

    fn checkpoint(&self) -> Result<&Path> {
        self.checkpoint.as_deref().context("this command needs --checkpoint")
    }
}

fn run_id(cfg: &Config) -> String {
    format!("{}-s{}", cfg.experiment.name, cfg.training.seed)
}

/// Clean and configured-condition evaluation written into `record`.
fn fill_evaluation(model: &Model, test: &Dataset, cfg: &Config, record: &mut ExperimentRecord) -> endp::Result<()> {
    let seed = cfg.eval_seed();
    let clean = evaluate(model, test, None, seed)?;
    record.clean_accuracy = Some(clean.accuracy);
    record.var_correct = clean.var_correct;
    record.var_incorrect = clean.var_incorrect;
    record.conditions = cfg
        .evaluation
        .conditions(seed)
        .par_iter()
        .map(|c| Ok((c.name(), evaluate(model, test, Some(c), seed)?.accuracy)))
        .collect::<endp::Result<_>>()?;
    Ok(())
}

pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<ExperimentRecord>,
    pub out: PathBuf,
}

/// Trains per the configuration, resuming from `--checkpoint` when given.
///
/// Data are loaded before anything is written, so a bad path leaves the
/// output directory untouched.
pub fn train(cfg: &Config, ov: &Overrides) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    ov.apply(&mut cfg);
    let conditions = cfg.evaluation.condition_names()?;
    let train_set = cfg.load_train()?;
    let test = if cfg.has_test_set() {
        Some(cfg.load_test()?)
    } else {
        None
    };
    let out = ov.out_dir(&cfg);

    let mut trainer = match &ov.checkpoint {
        Some(path) => Trainer::resume(Checkpoint::load(path)?, cfg.training.clone())?,
        None => Trainer::new(Model::init(cfg.network_spec()?, cfg.init_seed())?, cfg.training.clone())?,
    };
    let epochs = cfg.training.epochs as u64;
    let ckpt_dir = out.join("checkpoints");
    let records = train_with(
        &mut trainer,
        &train_set,
        &run_id(&cfg),
        Some(&ckpt_dir),
        |model, record| match &test {
            Some(test) if cfg.evaluation.every_epoch || record.epoch == epochs => {
                fill_evaluation(model, test, &cfg, record)
            }
            _ => Ok(()),
        },
    )?;
    trainer.checkpoint().save(&ckpt_dir.join("last.ckpt"))?;
    write_records(&out, &records, &conditions)?;
    Ok(TrainOutcome {
        model: trainer.model,
        records,
        out,
    })
}

/// Mean per-example loss on `ds` under the evaluation keys.
fn mean_loss(model: &Model, ds: &Dataset, cfg: &Config) -> Result<f64> {
    let loss = cfg.training.loss.unwrap_or_else(|| LossKind::default_for(model.kind()));
    let seed = cfg.eval_seed();
    let total: f64 = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            forward_backward(
                model,
                ds.image(i),
                ds.label(i),
                eval_key(seed, i as u64),
                loss,
                cfg.training.var_floor,
                Want::NONE,
            )
            .map(|o| o.loss)
        })
        .collect::<endp::Result<Vec<f64>>>()?
        .iter()
        .sum();
    Ok(total / ds.len() as f64)
}

/// Evaluates a checkpoint on the test set: one record with the clean and
/// configured-condition accuracies.
pub fn eval(cfg: &Config, ov: &Overrides) -> Result<ExperimentRecord> {
    let mut cfg = cfg.clone();
    ov.apply(&mut cfg);
    let conditions = cfg.evaluation.condition_names()?;
    let ckpt = Checkpoint::load(ov.checkpoint()?)?;
    let test = cfg.load_test()?;
    let start = Instant::now();
    let model = ckpt.model;
    let kl = match model.kind() {
        ModelKind::Endp => model.kl(cfg.training.prior_var)?,
        ModelKind::Deterministic => 0.0,
    };
    let settings = cfg.training.settings(&model, test.len());
    let nll = mean_loss(&model, &test, &cfg)?;
    let mut record = ExperimentRecord {
        run_id: format!("{}-eval", run_id(&cfg)),
        seed: cfg.training.seed,
        epoch: ckpt.epoch,
        nll,
        kl,
        kl_scale: settings.kl_scale,
        total: nll + settings.kl_scale * kl,
        clean_accuracy: None,
        conditions: Vec::new(),
        var_correct: None,
        var_incorrect: None,
        epoch_seconds: 0.0,
    };
    fill_evaluation(&model, &test, &cfg, &mut record)?;
    record.epoch_seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    write_records(&ov.out_dir(&cfg), std::slice::from_ref(&record), &conditions)?;
    Ok(record)
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    condition: String,
    count: usize,
    /// Byte offset of the first image in `images.bin`.
    offset: u64,
    labels: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    dtype: &'static str,
    shape: [usize; 3],
    entries: Vec<ManifestEntry>,
}

/// Perturbed images of every condition as little-endian `f64`, in test-set
/// order, with a JSON manifest.
fn dump_images(dir: &Path, model: &Model, test: &Dataset, conditions: &[AttackConfig], seed: u64) -> Result<()> {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for c in conditions {
        let offset = bytes.len() as u64;
        let images = (0..test.len())
            .into_par_iter()
            .map(|i| perturb(model, test.image(i), i as u64, c, seed))
            .collect::<endp::Result<Vec<_>>>()?;
        for img in images {
            img.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        }
        entries.push(ManifestEntry {
            condition: c.name(),
            count: test.len(),
            offset,
            labels: test.labels().to_vec(),
        });
    }
    write_atomic(&dir.join("images.bin"), &bytes)?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            dtype: "f64le",
            shape: test.shape(),
            entries,
        },
    )
}

/// Accuracy and target hit rate of a checkpoint under each configured
/// condition, with a clean row first.
pub fn attack(cfg: &Config, ov: &Overrides) -> Result<Vec<AttackRow>> {
    let mut cfg = cfg.clone();
    ov.apply(&mut cfg);
    let conditions = cfg.evaluation.conditions(cfg.eval_seed());
    ensure!(
        !conditions.is_empty(),
        "attack needs evaluation.gaussian or evaluation.fgsm entries"
    );
    let model = Checkpoint::load(ov.checkpoint()?)?.model;
    let test = cfg.load_test()?;
    let seed = cfg.eval_seed();
    let mut rows = vec![AttackRow::new(&evaluate(&model, &test, None, seed)?, None, None)];
    for c in &conditions {
        let report = evaluate(&model, &test, Some(c), seed)?;
        let target = (c.kind == AttackKind::FgsmTargeted).then_some(c.target_class).flatten();
        rows.push(AttackRow::new(&report, Some(c.level), target));
    }
    let out = ov.out_dir(&cfg);
    if cfg.evaluation.dump_images {
        dump_images(&out, &model, &test, &conditions, seed)?;
    }
    write_rows(&out, "attack", &rows)?;
    Ok(rows)
}

/// Ensemble sizes must be distinct and at least 2.
pub fn validate_sweep(ns: &[usize]) -> Result<()> {
    ensure!(!ns.is_empty(), "sweep-n needs at least one ensemble size");
    if let Some(n) = ns.iter().find(|&&n| n < 2) {
        bail!("ensemble size {n} is below 2");
    }
    let unique: BTreeSet<_> = ns.iter().collect();
    ensure!(unique.len() == ns.len(), "ensemble sizes repeat in {ns:?}");
    Ok(())
}

/// Trains and evaluates one model per ensemble size, all else shared.
pub fn sweep_n(cfg: &Config, ov: &Overrides, ns: &[usize]) -> Result<Vec<SweepRow>> {
    validate_sweep(ns)?;
    let mut cfg = cfg.clone();
    ov.apply(&mut cfg);
    ensure!(cfg.network.model == ModelKind::Endp, "sweep-n needs an EnDP model");
    let train_set = cfg.load_train()?;
    let test = cfg.load_test()?;
    let out = ov.out_dir(&cfg);
    let mut rows = Vec::new();
    for &n in ns {
        let mut tc = cfg.training.clone();
        tc.ensemble = Some(vec![n]);
        let mut trainer = Trainer::new(Model::init(cfg.network_spec()?, cfg.init_seed())?, tc)?;
        let mut seconds = 0.0;
        let mut total = f64::NAN;
        for _ in 0..cfg.training.epochs {
            let (elbo, s) = trainer.run_epoch(&train_set)?;
            seconds += s;
            total = elbo.total;
        }
        let accuracy = evaluate(&trainer.model, &test, None, cfg.eval_seed())?.accuracy;
        trainer
            .checkpoint()
            .save(&out.join("checkpoints").join(format!("n-{n}.ckpt")))?;
        rows.push(SweepRow {
            n,
            seed: cfg.training.seed,
            epochs: cfg.training.epochs,
            total,
            accuracy,
            epoch_seconds: seconds / cfg.training.epochs.max(1) as f64,
        });
    }
    write_rows(&out, "sweep", &rows)?;
    Ok(rows)
}

/// Finite-difference check of the training gradient on the first batch.
pub fn check_grad(cfg: &Config, ov: &Overrides, tolerance: f64) -> Result<GradCheckReport> {
    let mut cfg = cfg.clone();
    ov.apply(&mut cfg);
    let train_set = cfg.load_train()?;
    let mut model = match &ov.checkpoint {
        Some(path) => Checkpoint::load(path)?.model,
        None => Model::init(cfg.network_spec()?, cfg.init_seed())?,
    };
    if let Some(sizes) = &cfg.training.ensemble {
        model.set_ensemble(sizes)?;
    }
    let batch: Vec<usize> = (0..cfg.training.batch_size.min(train_set.len())).collect();
    let settings = cfg.training.settings(&model, train_set.len());
    let report = check_gradients(&model, &train_set, &batch, &settings, cfg.training.seed, tolerance)?;
    write_json(&ov.out_dir(&cfg).join("gradcheck.json"), &report)?;
    Ok(report)
}

/// Plain-text table of the training records.
pub fn summary_table(records: &[ExperimentRecord]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>5} {:>10} {:>10} {:>10} {:>8} {:>9}",
        "epoch", "nll", "kl", "total", "clean", "seconds"
    );
    for r in records {
        let clean = r.clean_accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(
            s,
            "{:>5} {:>10.4} {:>10.2} {:>10.4} {:>8} {:>9.1}",
            r.epoch, r.nll, r.kl, r.total, clean, r.epoch_seconds
        );
        for (name, acc) in &r.conditions {
            let _ = writeln!(s, "      {name:<20} {acc:.4}");
        }
    }
    s
}
