//! TOML experiment configuration with dotted-key overrides.
//!
//! ```toml
//! [model]
//! gamma = 1.0
//! kernel = { bandwidth = "median", estimator = "biased" }
//!
//! [train]
//! lr = 1e-4
//! batch = 8
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::SynthConfig;
use super::train::TrainConfig;
use crate::error::{config_err, Result};
use crate::imaging::ImagingConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub imaging: ImagingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for ExperimentConfig {
    /// Full-size model; synthetic subjects sized to match it.
    fn default() -> Self {
        Self {
            imaging: ImagingConfig::default(),
            model: ModelConfig::paper(),
            train: TrainConfig::default(),
            synth: SynthConfig { frames: 7, grid: 32, ..SynthConfig::default() },
        }
    }
}

impl ExperimentConfig {
    /// Small model and schedule matched to the default synthetic subjects.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig { epochs_adapt: 30, ..TrainConfig::default() },
            synth: SynthConfig::default(),
            imaging: ImagingConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            other => Err(config_err!("unknown preset {other:?} (paper, desk)")),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err!("{e}"))
    }

    /// Values in `path` layered over `base`.
    pub fn load(path: &Path, base: Self) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let patch: toml::Value = toml::from_str(&text).map_err(|e| config_err!("{}: {e}", path.display()))?;
        let mut merged = base.to_value()?;
        merge(&mut merged, patch);
        Self::from_value(merged)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config_err!("{e}"))
    }

    fn to_value(&self) -> Result<toml::Value> {
        toml::Value::try_from(self).map_err(|e| config_err!("{e}"))
    }

    fn from_value(v: toml::Value) -> Result<Self> {
        let cfg: Self = v.try_into().map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Sets one existing key, e.g. `train.lr=0.001` or
    /// `model.kernel.bandwidth={fixed=2.0}`. Values parse as TOML, falling
    /// back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config_err!("override {assignment:?} is not key=value"))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = self.to_value()?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| config_err!("unknown config key {key:?}"))?;
        }
        *slot = value;
        *self = Self::from_value(root)?;
        Ok(())
    }
}

fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
