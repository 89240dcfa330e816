use std::fs;
use std::path::{Path, PathBuf};

use rfmoe::training::{ModelConfig, TrainConfig};
use rfmoe::{Error, Result};
use serde::{Deserialize, Serialize};

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_log_every() -> usize {
    1
}

/// Everything one `train` invocation needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Write a metrics row every this many steps (validation steps are always written).
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be at least 1"));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.train.balance_loss(&self.model.gate)?;
        Ok(())
    }
}
