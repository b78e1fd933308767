//! TOML run configuration shared by the training subcommands.

use std::path::{Path, PathBuf};

use aerovit_core::adapter::AdapterConfig;
use aerovit_core::model::ModelConfig;
use aerovit_core::synth::ViewKind;
use aerovit_core::trainer::StageConfig;
use aerovit_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where training images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of synthetic images when `dir` is unset.
    pub n: usize,
    pub view: ViewKind,
    /// Directory of PNG/PGM/PPM images, resized to the model input.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: 256,
            view: ViewKind::Mixed,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Checkpoint to start from; required by the joint stage (unless
    /// `train.allow_without_mim`) and by fine-tuning.
    pub init_checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub train: StageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            init_checkpoint: None,
            data: DataConfig::default(),
            model: ModelConfig::toy(),
            adapter: AdapterConfig::default(),
            train: StageConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths inside the file are taken relative to the file.
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.out_dir);
        if let Some(p) = cfg.init_checkpoint.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.data.dir.as_mut() {
            rebase(p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.schedule.validate()?;
        self.train.contrast.validate()?;
        if self.data.dir.is_none() && self.data.n == 0 {
            return Err(Error::Config("data.n must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nsede = 2\n").is_err());
        assert!(RunConfig::from_toml("[model]\nembed_dims = 8\n").is_err());
        assert!(RunConfig::from_toml("[train.schedule]\nbase_lr = 1e-3\n").is_ok());
    }
}
