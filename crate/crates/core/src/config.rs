//! Run configuration as TOML with one section per component.
//!
//! Every section is optional and falls back to its defaults; unknown keys are
//! rejected with the dotted path of the offending field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentConfig;
use crate::error::{Error, Result};
use crate::geometry::AnchorGridConfig;
use crate::kl_losses::LossConfig;
use crate::scoring::ProposalConfig;
use crate::training::scene::SceneConfig;
use crate::training::TrainConfig;

/// The configuration shipped as `configs/default.toml`.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../../configs/default.toml");

/// Held-out scene set used by `evaluate`, `analyze-offsets` and the training
/// monitor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub scenes: usize,
    pub seed: u64,
    /// Proposals sampled per ground truth in the offset analysis.
    pub samples_per_gt: usize,
    pub bootstrap_resamples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scenes: 100,
            seed: 2,
            samples_per_gt: 5,
            bootstrap_resamples: 2000,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::config("eval.scenes", "must be positive"));
        }
        if self.samples_per_gt == 0 {
            return Err(Error::config("eval.samples_per_gt", "must be positive"));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::config("eval.bootstrap_resamples", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: AnchorGridConfig,
    pub scene: SceneConfig,
    pub assignment: AssignmentConfig,
    pub loss: LossConfig,
    pub proposal: ProposalConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses TOML without validating values.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<root>", e.message().to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message().to_string())
        })
    }

    /// Reads, parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.scene.validate(&self.grid)?;
        self.assignment.validate()?;
        self.loss.validate()?;
        self.proposal.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.train.monitor_scenes > self.eval.scenes {
            return Err(Error::config("train.monitor_scenes", "cannot exceed eval.scenes"));
        }
        Ok(())
    }
}
