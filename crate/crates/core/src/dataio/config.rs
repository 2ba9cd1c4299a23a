//! Run configuration.
//!
//! Configs are flat TOML key/value files. Unknown keys are load errors, all
//! keys are optional (falling back to the defaults below), and every range
//! violation names the offending key.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Neighbors per node in the kNN graphs.
    pub k: usize,
    /// Spatial patch side length (odd).
    pub w: usize,
    /// Retained principal components for the spatial stream.
    pub p: usize,
    /// Spectral embedding width.
    pub l_b: usize,
    /// Spatial embedding width.
    pub l_p: usize,
    /// Graph-convolution layers per branch.
    pub depth: usize,
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    /// Contrastive similarity temperature.
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Graphs are rebuilt from current features every this many epochs.
    pub refresh_period: usize,
    /// Labeled training pixels drawn per class.
    pub per_class: usize,
    pub seed: u64,
    /// Ablation: feed the joint branch the spectral embedding alone instead
    /// of the fused features.
    pub no_fusion: bool,
    /// Ablation: residual blocks without channel gating.
    pub no_se: bool,
    /// Ablation: train on cross-entropy only.
    pub no_contrast: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 10,
            w: 9,
            p: 8,
            l_b: 64,
            l_p: 64,
            depth: 2,
            tau: 0.99,
            temperature: 1.0,
            learning_rate: 1e-3,
            epochs: 200,
            refresh_period: 5,
            per_class: 20,
            seed: 1,
            no_fusion: false,
            no_se: false,
            no_contrast: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::config("k: must be >= 1"));
        }
        if self.w < 5 || self.w % 2 == 0 {
            return Err(Error::config("w: must be odd and >= 5"));
        }
        if self.p < 1 {
            return Err(Error::config("p: must be >= 1"));
        }
        if self.l_b < 1 {
            return Err(Error::config("l_b: must be >= 1"));
        }
        if self.l_p < 1 {
            return Err(Error::config("l_p: must be >= 1"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("tau: must lie strictly between 0 and 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature: must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate: must be >= 0"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs: must be >= 1"));
        }
        if self.refresh_period < 1 {
            return Err(Error::config("refresh_period: must be >= 1"));
        }
        if self.per_class < 1 {
            return Err(Error::config("per_class: must be >= 1"));
        }
        Ok(())
    }

    /// The pseudo-label threshold must exceed chance once the class count is
    /// known; checked at train time rather than load time.
    pub fn validate_for_classes(&self, classes: usize) -> Result<()> {
        self.validate()?;
        let chance = 1.0 / classes as f64;
        if self.tau <= chance {
            return Err(Error::Config(format!(
                "tau: {} must exceed chance level 1/{} = {:.4}",
                self.tau, classes, chance
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}
