use std::path::{Path, PathBuf};

use csunet_core::losses::LossConfig;
use csunet_core::train::{ReportConfig, TrainConfig};
use csunet_core::NetworkConfig;
use serde::{Deserialize, Serialize};

/// Everything a training run needs, as read from a JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Dataset directory or manifest file.
    pub data: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {}: {source}", path.display())]
    Schema { path: PathBuf, source: serde_json::Error },
    #[error("config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|source| ConfigError::Schema {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: csunet_core::Error| ConfigError::Invalid(e.to_string());
        self.network.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.loss.validate().map_err(wrap)?;
        if self.loss.class_count != self.network.num_classes {
            return Err(ConfigError::Invalid(format!(
                "loss.class_count {} differs from network.num_classes {}",
                self.loss.class_count, self.network.num_classes
            )));
        }
        Ok(())
    }

    pub fn report_config(&self) -> ReportConfig {
        ReportConfig {
            network: self.network.clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
        }
    }
}
