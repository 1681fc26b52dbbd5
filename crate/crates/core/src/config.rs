//! Experiment configuration, read from and echoed as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::{Fraction, DEFAULT_MAX_RETRIES, DEFAULT_MIN_CLASS_PIXELS};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::network::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Shapes,
    VocDir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Root of a VOC-style directory (`voc_dir` only).
    pub root: Option<PathBuf>,
    /// Labeled fraction of the training pool.
    pub fraction: Fraction,
    /// Seed of the labeled/unlabeled split.
    pub seed: u64,
    pub min_class_pixels: u64,
    pub max_retries: usize,
    /// Use a previously written split instead of sampling one.
    pub split_file: Option<PathBuf>,
    /// Generator seed of the synthetic images.
    pub shapes_seed: u64,
    pub shapes_train: usize,
    pub shapes_val: usize,
    pub canvas: (usize, usize),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Shapes,
            root: None,
            fraction: Fraction { num: 1, den: 16 },
            seed: 1,
            min_class_pixels: DEFAULT_MIN_CLASS_PIXELS,
            max_retries: DEFAULT_MAX_RETRIES,
            split_file: None,
            shapes_seed: 2020,
            shapes_train: 528,
            shapes_val: 128,
            canvas: (128, 128),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub augment: AugmentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fusion: FusionConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    /// Sets both the split seed and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.fusion.validate()?;
        self.augment.validate()?;
        let d = &self.dataset;
        match d.source {
            DatasetSource::VocDir if d.root.is_none() => {
                return Err(Error::config("dataset.root", "required for source = \"voc_dir\""));
            }
            DatasetSource::Shapes => {
                if !(2..=4).contains(&self.model.num_classes) {
                    return Err(Error::config("model.num_classes", "the shapes dataset supports 2 to 4 classes"));
                }
                if d.shapes_train == 0 || d.shapes_val == 0 {
                    return Err(Error::config("dataset.shapes_train", "dataset sizes must be positive"));
                }
                if d.canvas.0 < 64 || d.canvas.1 < 64 {
                    return Err(Error::config("dataset.canvas", "must be at least 64x64"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Dotted paths of the leaves in which two configurations differ.
pub fn config_diff(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<String> {
    fn walk(prefix: &str, a: &toml::Value, b: &toml::Value, out: &mut Vec<String>) {
        match (a, b) {
            (toml::Value::Table(ta), toml::Value::Table(tb)) => {
                let mut keys: Vec<&String> = ta.keys().chain(tb.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    match (ta.get(k), tb.get(k)) {
                        (Some(x), Some(y)) => walk(&path, x, y, out),
                        _ => out.push(path),
                    }
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let va = toml::Value::try_from(a).expect("configuration serializes");
    let vb = toml::Value::try_from(b).expect("configuration serializes");
    let mut out = Vec::new();
    walk("", &va, &vb, &mut out);
    out
}
