use std::fs;
use std::path::{Path, PathBuf};

use evlight_core::fusion::EvLightConfig;
use evlight_core::objectives::LossConfig;
use evlight_core::synth::DatasetConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{config_ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Random crop position; when off the crop is taken at the top-left corner.
    pub random_crop: bool,
    pub hflip: bool,
    /// Rotations by 90, 180 and 270 degrees.
    pub rotate: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            random_crop: true,
            hflip: true,
            rotate: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            random_crop: false,
            hflip: false,
            rotate: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Sequences optimized together in one step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Square crop side; `None` trains on full frames.
    pub crop: Option<usize>,
    pub augment: AugmentConfig,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    /// Frames per truncated backpropagation window.
    pub frames_per_step: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: EvLightConfig,
    pub manifest: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 1,
            epochs: 1,
            crop: Some(64),
            augment: AugmentConfig::default(),
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            frames_per_step: 2,
            seed: 0,
            loss: LossConfig::default(),
            model: EvLightConfig::default(),
            manifest: PathBuf::from("manifest.json"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        config_ensure!(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "learning_rate must be positive"
        );
        config_ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        config_ensure!(self.epochs >= 1, "epochs must be at least 1");
        config_ensure!(
            self.frames_per_step >= 1,
            "frames_per_step must be at least 1"
        );
        if let Some(c) = self.crop {
            config_ensure!(
                c >= 4 && c % 4 == 0,
                "crop {c} must be a positive multiple of 4"
            );
        }
        config_ensure!(
            self.betas.iter().all(|b| (0.0..1.0).contains(b)),
            "betas must lie in [0, 1)"
        );
        config_ensure!(
            self.adam_eps > 0.0 && self.adam_eps.is_finite(),
            "adam_eps must be positive"
        );
        self.loss.validate()?;
        self.model.validate()?;
        Ok(())
    }

    /// Reads a JSON config; relative paths are resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.manifest = base.join(&cfg.manifest);
        cfg.checkpoint_dir = base.join(&cfg.checkpoint_dir);
        cfg.resume = cfg.resume.map(|r| base.join(r));
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Input of `make-data`: the output directory plus the dataset description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MakeDataConfig {
    pub out: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
}

impl MakeDataConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = read_json(path)?;
        cfg.out = path.parent().unwrap_or(Path::new("")).join(&cfg.out);
        Ok(cfg)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
