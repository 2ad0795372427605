// SPDX-License-Identifier: Apache-2.0

//! Metrics files.
//!
//! `records.csv` has one row per epoch (or per evaluation) with columns
//!
//! ```text
//! run_id, seed, epoch, nll, kl, kl_scale, total, clean_accuracy,
//! acc_<condition>..., var_correct, var_incorrect, epoch_seconds
//! ```
//!
//! where the condition columns follow the configuration order, e.g.
//! `acc_gaussian_0.1, acc_fgsm_0.1, acc_fgsm_0.2`. Empty cells are values
//! that were not measured in that row. Floats are written in shortest
//! round-trip form, so `records.json` (the same rows serialized directly)
//! carries exactly the same numbers.
//!
//! Every file is written to a temporary name and renamed into place, so a
//! failed command never leaves a partial file behind.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use endp::robustness::ConditionReport;
use endp::train::ExperimentRecord;
use serde::{Deserialize, Serialize};

/// Column name of condition `name`'s accuracy.
pub fn accuracy_column(name: &str) -> String {
    format!("acc_{name}")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn records_header(conditions: &[String]) -> Vec<String> {
    let mut h: Vec<String> = [
        "run_id",
        "seed",
        "epoch",
        "nll",
        "kl",
        "kl_scale",
        "total",
        "clean_accuracy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(conditions.iter().map(|c| accuracy_column(c)));
    h.extend(["var_correct", "var_incorrect", "epoch_seconds"].map(String::from));
    h
}

/// CSV text of `records` with one accuracy column per entry of `conditions`.
pub fn records_csv(records: &[ExperimentRecord], conditions: &[String]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(records_header(conditions))?;
    for r in records {
        let mut row = vec![
            r.run_id.clone(),
            r.seed.to_string(),
            r.epoch.to_string(),
            r.nll.to_string(),
            r.kl.to_string(),
            r.kl_scale.to_string(),
            r.total.to_string(),
            opt(r.clean_accuracy),
        ];
        for c in conditions {
            row.push(opt(r.conditions.iter().find(|(n, _)| n == c).map(|(_, a)| *a)));
        }
        row.extend([opt(r.var_correct), opt(r.var_incorrect), r.epoch_seconds.to_string()]);
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Writes `records.csv` and `records.json` into `dir`.
pub fn write_records(dir: &Path, records: &[ExperimentRecord], conditions: &[String]) -> Result<()> {
    write_atomic(&dir.join("records.csv"), &records_csv(records, conditions)?)?;
    write_json(&dir.join("records.json"), records)
}

/// One row of `attack.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub condition: String,
    pub level: Option<f64>,
    pub target_class: Option<usize>,
    pub count: usize,
    pub accuracy: f64,
    pub target_hit_rate: Option<f64>,
    pub var_correct: Option<f64>,
    pub var_incorrect: Option<f64>,
}

impl AttackRow {
    pub fn new(report: &ConditionReport, level: Option<f64>, target_class: Option<usize>) -> Self {
        Self {
            condition: report.name.clone(),
            level,
            target_class,
            count: report.count,
            accuracy: report.accuracy,
            target_hit_rate: report.target_hit_rate,
            var_correct: report.var_correct,
            var_incorrect: report.var_incorrect,
        }
    }
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub seed: u64,
    pub epochs: usize,
    pub total: f64,
    pub accuracy: f64,
    /// Mean wall time of one training epoch.
    pub epoch_seconds: f64,
}

/// Writes `<stem>.csv` and `<stem>.json` for flat rows.
pub fn write_rows<T: Serialize>(dir: &Path, stem: &str, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    write_atomic(&dir.join(format!("{stem}.csv")), &w.into_inner()?)?;
    write_json(&dir.join(format!("{stem}.json")), rows)
}
