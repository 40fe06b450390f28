//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use r2dl_core::data::{self, LabelRule, SequenceDataset, SplitSpec, SynthConfig, Tokenization};
use r2dl_core::{LabelMap, R2dlConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Invalid;

/// One JSON document describing a whole experiment. Every section has
/// defaults, so `{}` is a valid config (the synthetic tasks).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub source_split: SplitSpec,
    pub target_split: SplitSpec,
    pub classifier: TrainConfig,
    pub r2dl: R2dlConfig,
    /// Target class of each source class; identity when omitted.
    pub label_map: Option<Vec<usize>>,
    pub sweep_data: SweepDataConfig,
    pub sweep_ksvd: SweepKsvdConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        #[serde(default)]
        sizes: SynthConfig,
    },
    Files {
        source: DatasetSpec,
        target: DatasetSpec,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            sizes: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    #[default]
    Csv,
    Fasta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Relative paths are resolved against the config file's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub format: DatasetFormat,
    #[serde(default = "default_sequence_column")]
    pub sequence_column: String,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default)]
    pub label_rule: LabelRule,
    #[serde(default)]
    pub tokenization: Tokenization,
}

fn default_sequence_column() -> String {
    "sequence".into()
}

fn default_label_column() -> String {
    "label".into()
}

impl DatasetSpec {
    pub fn load(&self) -> Result<SequenceDataset> {
        let ds = match self.format {
            DatasetFormat::Csv => data::load_csv(&self.path, &self.sequence_column, &self.label_column, self.tokenization),
            DatasetFormat::Fasta => data::load_fasta(&self.path, &self.label_rule, self.tokenization),
        };
        ds.with_context(|| format!("loading {}", self.path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepDataConfig {
    /// Training-set sizes, ascending. Subsets are nested.
    pub sizes: Vec<usize>,
    /// Passes over each subset: `outer_iterations = epochs · ⌈n / batch⌉`.
    /// When absent every size runs `r2dl.outer_iterations`.
    pub epochs: Option<usize>,
}

impl Default for SweepDataConfig {
    fn default() -> Self {
        Self {
            sizes: vec![500, 1000, 2000, 4000],
            epochs: Some(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepKsvdConfig {
    /// k-SVD sweep counts per projection stage, ascending.
    pub sweeps: Vec<usize>,
}

impl Default for SweepKsvdConfig {
    fn default() -> Self {
        Self { sweeps: vec![10, 20, 30] }
    }
}

fn check_grid(name: &str, grid: &[usize]) -> Result<()> {
    if grid.is_empty() {
        return Err(Invalid(format!("{name} must not be empty")).into());
    }
    if grid[0] == 0 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Invalid(format!("{name} must be positive and strictly ascending, got {grid:?}")).into());
    }
    Ok(())
}

impl ExperimentConfig {
    /// Reads and validates a config file. Dataset paths are made absolute
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Invalid(format!("config file {} does not exist", path.display())).into());
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataConfig::Files { source, target } = &mut cfg.data {
            for spec in [source, target] {
                if spec.path.is_relative() {
                    spec.path = base.join(&spec.path);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DataConfig::Files { source, target } = &self.data {
            for spec in [source, target] {
                if !spec.path.exists() {
                    return Err(Invalid(format!("dataset {} does not exist", spec.path.display())).into());
                }
            }
        }
        self.classifier.validate()?;
        for spec in [&self.source_split, &self.target_split] {
            // Absolute counts can only be checked against a loaded dataset.
            if let data::SplitSizes::Fractions(_) = spec.sizes {
                spec.counts(0)?;
            }
        }
        check_grid("sweep_data.sizes", &self.sweep_data.sizes)?;
        if self.sweep_data.epochs == Some(0) {
            return Err(Invalid("sweep_data.epochs must be >= 1".into()).into());
        }
        check_grid("sweep_ksvd.sweeps", &self.sweep_ksvd.sweeps)?;
        Ok(())
    }

    /// Source and target datasets as configured.
    pub fn datasets(&self) -> Result<(SequenceDataset, SequenceDataset)> {
        match &self.data {
            DataConfig::Synthetic { sizes } => Ok(data::synth_tasks(self.seed, sizes)?),
            DataConfig::Files { source, target } => Ok((source.load()?, target.load()?)),
        }
    }

    pub fn target_tokenization(&self) -> Tokenization {
        match &self.data {
            DataConfig::Synthetic { .. } => Tokenization::Char,
            DataConfig::Files { target, .. } => target.tokenization,
        }
    }

    pub fn label_map(&self, num_source: usize, num_target: usize) -> Result<LabelMap> {
        match &self.label_map {
            Some(m) => {
                if m.len() != num_source {
                    return Err(Invalid(format!(
                        "label_map has {} entries but the source model has {num_source} classes",
                        m.len()
                    ))
                    .into());
                }
                Ok(LabelMap::new(m.clone(), num_target)?)
            }
            None if num_source == num_target => Ok(LabelMap::identity(num_source)),
            None => Err(Invalid(format!(
                "source model has {num_source} classes and the target task {num_target}; set label_map"
            ))
            .into()),
        }
    }
}
