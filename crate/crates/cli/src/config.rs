//! The resolved configuration of one run: file values, then flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use cbamnet_core::backbone::ModelConfig;
use cbamnet_core::data::SplitConfig;
use cbamnet_core::hash::sha256_hex;
use cbamnet_core::preprocess::PreprocessConfig;
use cbamnet_core::training::TrainConfig;
use cbamnet_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Copied into every component seed when the config is resolved.
    pub seed: u64,
}

/// The part of a `RunConfig` that determines results; paths are left out so
/// the same run written elsewhere hashes the same.
#[derive(Serialize)]
struct HashedView<'a> {
    preprocess: &'a PreprocessConfig,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    split: &'a SplitConfig,
    seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `path` if given, else starts from defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Applies the global seed to every component and validates.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.preprocess.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.split.seed = self.seed;
        self.preprocess.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        Ok(self)
    }

    pub fn hash(&self) -> String {
        let view = HashedView {
            preprocess: &self.preprocess,
            model: &self.model,
            train: &self.train,
            split: &self.split,
            seed: self.seed,
        };
        sha256_hex(&serde_json::to_vec(&view).expect("config serializes"))
    }

    /// The config without paths, as embedded in checkpoints.
    pub fn portable(&self) -> Self {
        Self {
            data: None,
            out: None,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_paths_and_tracks_settings() {
        let a = RunConfig::default().resolve(None).unwrap();
        let b = RunConfig {
            data: Some("x".into()),
            out: Some("y".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::default().resolve(Some(3)).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.model.seed, 3);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"max_epochs": 3}}"#).unwrap();
        assert_eq!(c.train.max_epochs, 3);
        assert_eq!(c.preprocess, PreprocessConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
