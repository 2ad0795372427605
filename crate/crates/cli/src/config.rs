// SPDX-License-Identifier: Apache-2.0

//! Experiment configuration files.
//!
//! A configuration is TOML with five sections. Unknown keys are errors in
//! every section, so a misspelled option never silently falls back to its
//! default.
//!
//! ```toml
//! [experiment]
//! name = "mnist-desk"
//!
//! [data]
//! format = "idx"
//! train_images = "data/mnist/train-images-idx3-ubyte"
//! train_labels = "data/mnist/train-labels-idx1-ubyte"
//! test_images = "data/mnist/t10k-images-idx3-ubyte"
//! test_labels = "data/mnist/t10k-labels-idx1-ubyte"
//! train_subset = 10000
//!
//! [network]
//! preset = "mnist"
//! ensemble = 200
//!
//! [training]
//! epochs = 10
//! batch_size = 32
//! learning_rate = 1e-3
//! seed = 1
//!
//! [evaluation]
//! gaussian = [0.1]
//! fgsm = [0.1, 0.2]
//! target_class = 3
//! ```
//!
//! Relative paths are taken relative to the directory holding the file.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use endp::data::{load_cifar10, load_idx, Dataset};
use endp::network::{LayerSpec, ModelKind, NetworkSpec};
use endp::robustness::AttackConfig;
use endp::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub experiment: ExperimentConfig,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Output directory; `--out` overrides it. Defaults to `runs/<name>`.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Idx,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    /// CIFAR-10 batch files.
    #[serde(default)]
    pub train_files: Vec<PathBuf>,
    #[serde(default)]
    pub test_files: Vec<PathBuf>,
    /// Class-stratified subset sizes; `None` keeps the whole split.
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
    #[serde(default)]
    pub subset_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Mnist,
    CifarLike,
}

/// Either a preset or an explicit layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub model: ModelKind,
    /// Fixed ensemble size for every activation layer.
    #[serde(default)]
    pub ensemble: Option<usize>,
    /// Input side for the `cifar_like` preset.
    #[serde(default)]
    pub side: Option<usize>,
    #[serde(default)]
    pub input: Option<[usize; 3]>,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
    /// Seed of the parameter initialization; defaults to the training seed.
    #[serde(default)]
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Seed of the evaluation noise; defaults to the training seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Gaussian noise variances.
    #[serde(default)]
    pub gaussian: Vec<f64>,
    /// Targeted FGSM step sizes.
    #[serde(default)]
    pub fgsm: Vec<f64>,
    #[serde(default)]
    pub target_class: Option<usize>,
    /// Evaluate after every epoch instead of only after the last.
    #[serde(default)]
    pub every_epoch: bool,
    /// `attack` also writes the perturbed images.
    #[serde(default)]
    pub dump_images: bool,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in [
            &mut d.train_images,
            &mut d.train_labels,
            &mut d.test_images,
            &mut d.test_labels,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        d.train_files.iter_mut().chain(d.test_files.iter_mut()).for_each(fix);
        if let Some(out) = &mut self.experiment.out {
            fix(out);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.network_spec()?;
        for c in self.evaluation.conditions(0) {
            c.validate()?;
        }
        self.evaluation.condition_names()?;
        ensure!(
            self.evaluation.fgsm.is_empty() || self.evaluation.target_class.is_some(),
            "evaluation.fgsm needs evaluation.target_class"
        );
        let d = &self.data;
        match d.format {
            DataFormat::Idx => {
                ensure!(
                    d.train_files.is_empty() && d.test_files.is_empty(),
                    "train_files/test_files are for format = \"cifar10\""
                );
                ensure!(
                    d.test_images.is_some() == d.test_labels.is_some(),
                    "test_images and test_labels go together"
                );
                ensure!(
                    d.train_images.is_some() == d.train_labels.is_some(),
                    "train_images and train_labels go together"
                );
            }
            DataFormat::Cifar10 => ensure!(
                [&d.train_images, &d.train_labels, &d.test_images, &d.test_labels]
                    .iter()
                    .all(|p| p.is_none()),
                "format = \"cifar10\" takes train_files/test_files"
            ),
        }
        Ok(())
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let n = &self.network;
        let mut spec = match (n.preset, &n.layers) {
            (Some(_), Some(_)) => bail!("network: give either preset or layers, not both"),
            (None, None) => bail!("network: give a preset or a layer list"),
            (Some(preset), None) => {
                ensure!(
                    n.input.is_none() && n.classes.is_none(),
                    "network: input and classes come from the preset"
                );
                match preset {
                    Preset::Mnist => {
                        ensure!(n.side.is_none(), "network.side applies to cifar_like only");
                        NetworkSpec::mnist(2)
                    }
                    Preset::CifarLike => NetworkSpec::cifar_like(n.side.unwrap_or(36)),
                }
            }
            (None, Some(layers)) => NetworkSpec {
                input: n.input.context("network.input is required with layers")?,
                classes: n.classes.context("network.classes is required with layers")?,
                model: n.model,
                layers: layers.clone(),
            },
        };
        spec.model = n.model;
        if let Some(size) = n.ensemble {
            spec = spec.with_ensemble(size);
        } else if n.preset == Some(Preset::Mnist) && n.model == ModelKind::Endp {
            bail!("network.ensemble is required with the mnist preset");
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn eval_seed(&self) -> u64 {
        self.evaluation.seed.unwrap_or(self.training.seed)
    }

    pub fn init_seed(&self) -> u64 {
        self.network.init_seed.unwrap_or(self.training.seed)
    }

    pub fn has_test_set(&self) -> bool {
        match self.data.format {
            DataFormat::Idx => self.data.test_images.is_some(),
            DataFormat::Cifar10 => !self.data.test_files.is_empty(),
        }
    }

    pub fn load_train(&self) -> Result<Dataset> {
        let d = &self.data;
        let ds = match d.format {
            DataFormat::Idx => load_idx(
                d.train_images.as_deref().context("data.train_images is not set")?,
                d.train_labels.as_deref().context("data.train_labels is not set")?,
            )?,
            DataFormat::Cifar10 => {
                ensure!(!d.train_files.is_empty(), "data.train_files is empty");
                load_cifar10(&d.train_files)?
            }
        };
        subset(ds, d.train_subset, d.subset_seed)
    }

    pub fn load_test(&self) -> Result<Dataset> {
        let d = &self.data;
        let ds = match d.format {
            DataFormat::Idx => load_idx(
                d.test_images.as_deref().context("data.test_images is not set")?,
                d.test_labels.as_deref().context("data.test_labels is not set")?,
            )?,
            DataFormat::Cifar10 => {
                ensure!(!d.test_files.is_empty(), "data.test_files is empty");
                load_cifar10(&d.test_files)?
            }
        };
        subset(ds, d.test_subset, d.subset_seed)
    }
}

fn subset(ds: Dataset, size: Option<usize>, seed: u64) -> Result<Dataset> {
    Ok(match size {
        Some(n) => ds.stratified(n, seed)?,
        None => ds,
    })
}

impl EvaluationConfig {
    /// Gaussian conditions first, then FGSM, each in file order.
    pub fn conditions(&self, seed: u64) -> Vec<AttackConfig> {
        let target = self.target_class.unwrap_or(0);
        self.gaussian
            .iter()
            .map(|&s| AttackConfig::gaussian(s, seed))
            .chain(self.fgsm.iter().map(|&e| AttackConfig::fgsm(e, target, seed)))
            .collect()
    }

    /// Column names of the configured conditions; duplicates are an error.
    pub fn condition_names(&self) -> Result<Vec<String>> {
        let names: Vec<String> = self.conditions(0).iter().map(AttackConfig::name).collect();
        let unique: BTreeSet<&String> = names.iter().collect();
        ensure!(unique.len() == names.len(), "evaluation lists a condition twice");
        Ok(names)
    }
}
