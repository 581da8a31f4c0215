//! Run configuration read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{parse_err, Result};
use crate::filter_lab::TrainConfig;
use crate::gradcheck::GradCheckConfig;
use crate::vmaf::FeatureConfig;

/// Every section is optional and falls back to its defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub gradcheck: GradCheckConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| parse_err("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| parse_err("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.train.validate()?;
        self.gradcheck.validate()
    }
}
