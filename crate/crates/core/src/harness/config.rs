use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graying::{GrayingConfig, GrayingMethod};
use crate::vitcore::{ConvMixerSpec, ImageShape, ModelSpec};

use super::data::SynthSpec;
use super::optim::OptimizerSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config {path}: {message}")]
    Read { path: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("missing file: {0}")]
    MissingFile(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Vit(ModelSpec),
    ConvMixer(ConvMixerSpec),
}

impl ModelConfig {
    pub fn image(&self) -> ImageShape {
        match self {
            ModelConfig::Vit(s) => s.image,
            ModelConfig::ConvMixer(s) => s.image,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelConfig::Vit(s) => s.classes,
            ModelConfig::ConvMixer(s) => s.classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SynthSpec),
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

/// One training run. `seed` has no default and must be present in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub graying: GrayingConfig,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Record per-layer token condition numbers on a fixed probe batch after
    /// every epoch.
    #[serde(default)]
    pub trace_condition: bool,
    #[serde(default = "default_probe")]
    pub probe_size: usize,
}

fn default_probe() -> usize {
    32
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        match &self.model {
            ModelConfig::Vit(s) => s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ModelConfig::ConvMixer(s) => s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?,
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be positive".into());
        }
        if self.graying.method != GrayingMethod::None {
            self.graying.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.optimizer.validate().map_err(ConfigError::Invalid)?;
        match &self.dataset {
            DatasetSpec::Synthetic(s) => {
                if s.classes != self.model.classes() {
                    return invalid(format!(
                        "dataset has {} classes, model {}",
                        s.classes,
                        self.model.classes()
                    ));
                }
                if s.val_per_class == 0 {
                    return invalid("val_per_class must be positive".into());
                }
            }
            DatasetSpec::Cifar10 { dir, .. } => {
                if !dir.is_dir() {
                    return Err(ConfigError::MissingFile(dir.display().to_string()));
                }
                let image = self.model.image();
                if image != super::data::CIFAR_SHAPE || self.model.classes() != 10 {
                    return invalid("CIFAR-10 needs a 32x32x3 input and 10 classes".into());
                }
            }
        }
        Ok(())
    }
}
