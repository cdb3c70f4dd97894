//! Whole-run configuration, read from a TOML file. Every section and key is
//! optional; missing values take their defaults and unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::inference::TemporalEnhanceConfig;
use crate::model::ModelConfig;
use crate::synthgen::Difficulty;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// First episode seed of a generated dataset.
    pub dataset: u64,
    /// Weight initialization.
    pub init: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { dataset: 0, init: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory that relative output paths resolve against.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub temporal: TemporalEnhanceConfig,
    pub difficulty: Difficulty,
    pub seeds: Seeds,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.predict.validate(self.model.diffusion_steps)?;
        if !(self.eval.sigma_frac > 0.0 && self.eval.sigma_frac.is_finite()) {
            return Err(Error::config("eval.sigma_frac must be positive"));
        }
        self.temporal.validate()?;
        self.difficulty.validate()
    }

    /// Resolves `path` against the output directory unless it is absolute.
    pub fn out_path(&self, path: &Path) -> PathBuf {
        self.paths.out_dir.join(path)
    }
}
