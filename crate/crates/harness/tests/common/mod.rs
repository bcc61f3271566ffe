#![allow(dead_code)]

use std::path::{Path, PathBuf};

use evlight_core::fusion::EvLightConfig;
use evlight_core::synth::{make_dataset, DatasetConfig, SceneConfig};
use evlight_harness::config::TrainConfig;

pub fn scene(seed: u64, frames: usize) -> SceneConfig {
    SceneConfig {
        height: 32,
        width: 32,
        frames,
        seed,
        ..Default::default()
    }
}

/// Writes `scenes` 32×32 sequences, the last `test` of which form the test split.
pub fn dataset(root: &Path, scenes: usize, test: usize, frames: usize) -> PathBuf {
    let cfg = DatasetConfig {
        scenes: (0..scenes as u64).map(|s| scene(s + 1, frames)).collect(),
        test_scenes: test,
        ..Default::default()
    };
    make_dataset(root, &cfg).unwrap();
    root.join("manifest.json")
}

pub fn tiny_model() -> EvLightConfig {
    EvLightConfig {
        channels: 4,
        bins: 4,
        illumination_hidden: 4,
        ..Default::default()
    }
}

pub fn tiny_train(manifest: &Path, ckpt: &Path) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs: 2,
        crop: Some(16),
        model: tiny_model(),
        manifest: manifest.to_path_buf(),
        checkpoint_dir: ckpt.to_path_buf(),
        ..Default::default()
    }
}
