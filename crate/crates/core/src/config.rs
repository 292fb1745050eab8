//! Run configuration: one TOML file with `[paths]`, `[model]`, `[train]`, `[loss]`,
//! `[scene]` and `[generate]` sections. Every field has a default, so an empty file is valid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SceneConfig;
use crate::error::{CaimError, Result};
use crate::model::ModelConfig;
use crate::train::{LossConfig, TrainConfig};

/// Environment variable overriding both the training and the scene seed.
pub const SEED_ENV: &str = "CAIM_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Scenes written by `gen-data`; scene `i` uses seed `scene.seed + i`.
    pub count: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { count: 250 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub scene: SceneConfig,
    pub generate: GenerateConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CaimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CaimError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CaimError::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Applies `CAIM_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse::<u64>().map_err(|_| CaimError::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
            self.train.seed = seed;
            self.scene.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.scene.validate()?;
        if self.scene.t_len != self.model.t_len || self.scene.bands != self.model.bands {
            return Err(CaimError::Config(format!(
                "scene (T={}, C={}) does not match model (T={}, C={})",
                self.scene.t_len, self.scene.bands, self.model.t_len, self.model.bands
            )));
        }
        if self.train.patch % 4 != 0 {
            return Err(CaimError::Config(format!("patch {} must be a multiple of 4", self.train.patch)));
        }
        Ok(())
    }

    /// The full configuration as `# `-prefixed TOML lines, for report headers.
    pub fn provenance(&self) -> Result<String> {
        Ok(self.to_toml_string()?.lines().map(|l| format!("# {l}\n")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.channels, 64);
        assert_eq!(cfg.model.hidden, 32);
        assert_eq!(cfg.loss.gamma, 2.0);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.patch, 64);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = RunConfig::from_toml_str("[train]\nepochs = 3\n[loss]\nclass_weight_mode = \"complement\"\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert!(RunConfig::from_toml_str("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\nt_len = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\nt_len = 5\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\npatch = 30\n").is_err());
    }
}
