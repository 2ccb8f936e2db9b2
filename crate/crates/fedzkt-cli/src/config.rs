//! Experiment configuration: a TOML file selecting the dataset, the
//! algorithm and the federation settings. Parsing resolves every default
//! so the echoed config reproduces the run exactly.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fedzkt::data::{
    load_idx_dataset, make_noise_dataset, make_synthetic_dataset, LabeledDataset,
};
use fedzkt::fed::FederationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedzkt,
    Fedmd,
}

/// Where the train/test pair comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// IDX image/label file pairs (the MNIST container format).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Generated fixture; one draw is split into train and test so both
    /// share the class templates without sharing samples.
    Synthetic {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        shape: [usize; 3],
        seed: u64,
    },
}

/// Public distillation set for the FedMD baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PublicDatasetConfig {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Synthetic {
        classes: usize,
        per_class: usize,
        shape: [usize; 3],
        seed: u64,
    },
    /// Uniform noise images: a deliberately mismatched public set.
    Noise {
        samples: usize,
        shape: [usize; 3],
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_dataset: Option<PublicDatasetConfig>,
    #[serde(default)]
    pub federation: FederationConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.federation
            .validate()
            .context("invalid [federation] section")?;
        match &self.dataset {
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for path in [train_images, train_labels, test_images, test_labels] {
                    if !path.exists() {
                        bail!("dataset file {} does not exist", path.display());
                    }
                }
            }
            DatasetConfig::Synthetic {
                classes,
                per_class,
                test_per_class,
                shape,
                ..
            } => {
                if *classes < 2 || *per_class == 0 || *test_per_class == 0 {
                    bail!("synthetic dataset needs at least 2 classes and positive sample counts");
                }
                if shape.contains(&0) {
                    bail!("synthetic dataset shape must have positive dims");
                }
            }
        }
        if self.algorithm == Algorithm::Fedmd && self.public_dataset.is_none() {
            bail!("algorithm \"fedmd\" requires a [public_dataset] section");
        }
        if let Some(public) = &self.public_dataset {
            match public {
                PublicDatasetConfig::Idx { images, labels } => {
                    for path in [images, labels] {
                        if !path.exists() {
                            bail!("public dataset file {} does not exist", path.display());
                        }
                    }
                }
                PublicDatasetConfig::Synthetic {
                    classes, per_class, ..
                } => {
                    if *classes < 2 || *per_class == 0 {
                        bail!("public synthetic set needs at least 2 classes and samples");
                    }
                }
                PublicDatasetConfig::Noise { samples, .. } => {
                    if *samples == 0 {
                        bail!("public noise set needs at least one sample");
                    }
                }
            }
        }
        Ok(())
    }

    /// The resolved TOML echo, with every default explicit.
    pub fn to_resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }
}

/// Parses and validates a config file; errors carry the file path and,
/// for TOML syntax problems, the line.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    cfg.validate()
        .with_context(|| format!("validating config {}", path.display()))?;
    Ok(cfg)
}

/// Loads the train/test pair. Synthetic fixtures are drawn once with
/// `per_class + test_per_class` samples per class and split, so the test
/// set shares the task but not the samples.
pub fn load_datasets(cfg: &DatasetConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match cfg {
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx_dataset(train_images, train_labels)?;
            let test = load_idx_dataset(test_images, test_labels)?;
            Ok((train, test))
        }
        DatasetConfig::Synthetic {
            classes,
            per_class,
            test_per_class,
            shape,
            seed,
        } => {
            let total = per_class + test_per_class;
            let full = make_synthetic_dataset(*classes, total, *shape, *seed)?;
            let mut train_idx = Vec::with_capacity(classes * per_class);
            let mut test_idx = Vec::with_capacity(classes * test_per_class);
            for class in 0..*classes {
                let base = class * total;
                train_idx.extend(base..base + per_class);
                test_idx.extend(base + per_class..base + total);
            }
            Ok((full.subset(&train_idx)?, full.subset(&test_idx)?))
        }
    }
}

pub fn load_public_dataset(cfg: &PublicDatasetConfig) -> Result<LabeledDataset> {
    match cfg {
        PublicDatasetConfig::Idx { images, labels } => Ok(load_idx_dataset(images, labels)?),
        PublicDatasetConfig::Synthetic {
            classes,
            per_class,
            shape,
            seed,
        } => Ok(make_synthetic_dataset(*classes, *per_class, *shape, *seed)?),
        PublicDatasetConfig::Noise {
            samples,
            shape,
            seed,
        } => Ok(make_noise_dataset(*samples, *shape, *seed)?),
    }
}
