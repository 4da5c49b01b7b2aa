//! Run configuration: one JSON document resolving every knob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{SceneSpec, SequenceParams};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train_weak: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train_weak: 150,
            val: 30,
            test: 49,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Top-level seed; data generation uses the "datagen" substream of it.
    pub seed: u64,
    pub scene: SceneSpec,
    pub dataset: SequenceParams,
    pub splits: SplitSizes,
    /// Training settings. `train.seed` drives the `train` command; `compare`
    /// and `ablate` substitute each entry of `seeds`.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Fill the `runtime_seconds` column. Off by default since timings break
    /// byte-identical reruns.
    pub record_runtime: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scene: SceneSpec::default(),
            dataset: SequenceParams::default(),
            splits: SplitSizes::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("out"),
            record_runtime: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let side = self.train.model.min_input_side();
        if self.scene.width < side || self.scene.height < side {
            return Err(Error::Config(format!(
                "scene is {}x{} but the model needs at least {side}x{side}",
                self.scene.width, self.scene.height
            )));
        }
        Ok(())
    }

    pub fn datagen_seed(&self) -> u64 {
        crate::rng::derive_seed(self.seed, "datagen")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 1}}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.splits, SplitSizes::default());
    }
}
