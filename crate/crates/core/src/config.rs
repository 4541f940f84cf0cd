//! The experiment configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::DatasetConfig;
use crate::train::{ModelConfig, TrainSchedule};

/// Output locations, relative paths resolved against the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset base path; `.manifest.json` and `.bin` are appended.
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: PathBuf::from("data/shapes"),
            checkpoints: PathBuf::from("checkpoints"),
            reports: PathBuf::from("reports"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    /// Checks every section and their cross-references.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.schedule.validate()?;
        self.model.validate(self.dataset.views)?;
        let dv = self.dataset.descriptor_len();
        if self.model.encoder.descriptor_len != dv {
            return Err(Error::Config(format!(
                "model.encoder.descriptor_len is {} but dataset.resolution {} yields {dv}",
                self.model.encoder.descriptor_len, self.dataset.resolution
            )));
        }
        if self.model.encoder.knn_k >= self.dataset.points {
            return Err(Error::Config(format!(
                "model.encoder.knn_k ({}) must be smaller than dataset.points ({})",
                self.model.encoder.knn_k, self.dataset.points
            )));
        }
        Ok(())
    }
}
