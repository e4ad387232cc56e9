//! Training configuration file (TOML).
//!
//! ```toml
//! version = 1
//! seed = 0
//! epochs = 5
//! batch_size = 4
//! lr = 1e-4
//! scales = [64, 96, 128]
//!
//! [data]
//! count = 32
//! [data.synthetic]
//! size = 96
//! ```
//!
//! `model`, `loss` and `augment` tables are optional and default to the tiny
//! binary model, the default compound loss and no augmentation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentationConfig, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    /// Split directory written by `gen-data`; takes precedence over `synthetic`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub count: usize,
}

impl DataSource {
    /// Loads or generates the dataset. Relative directories resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match (&self.dir, &self.synthetic) {
            (Some(dir), _) => crate::data::cache::load_split(&base.join(dir)),
            (None, Some(spec)) => Dataset::synthetic(spec, self.count),
            (None, None) => Err(Error::Config("data needs either `dir` or `synthetic`".into())),
        }
    }
}

fn default_model() -> ModelConfig {
    ModelConfig::tiny()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub scales: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Stop after this many optimizer steps; the schedule spans them.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub augment: Option<AugmentationConfig>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    pub data: DataSource,
}

impl TrainConfig {
    /// Small binary run on synthetic data.
    pub fn tiny() -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            model: ModelConfig::tiny(),
            loss: LossConfig::default(),
            epochs: 5,
            batch_size: 4,
            lr: 1e-4,
            scales: vec![64, 96, 128],
            seed: 0,
            max_steps: None,
            augment: Some(AugmentationConfig::default()),
            checkpoint_dir: None,
            data: DataSource {
                dir: None,
                synthetic: Some(SyntheticSpec::default()),
                count: 32,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.loss.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || (self.epochs == 0 && self.max_steps.is_none()) {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| s == 0 || s % 32 != 0) {
            return Err(Error::Config(format!(
                "scales {:?} must be non-empty multiples of 32",
                self.scales
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}
