//! Run configuration file.
//!
//! ```toml
//! [scene]
//! image_size = [96, 96]
//! corruption = { kind = "fog_blend", strength = 0.6 }
//!
//! [data]
//! count = 80
//! train_fraction = 0.8
//!
//! [train]
//! total_steps = 2000
//! switches = { use_bt = true, use_warp = true, use_crop = true, pooling = "segconf" }
//!
//! [paths]
//! data_dir = "data"
//! out_dir = "runs/default"
//! ```
//!
//! Every table and key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::synthdata::{SceneSpec, Split};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataOptions {
    pub count: usize,
    pub train_fraction: f64,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            count: 80,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub split: Split,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { split: Split::Val }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub data: DataOptions,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    /// Not part of the fingerprint.
    pub paths: Paths,
}

/// The fingerprinted part of a config.
#[derive(Serialize)]
struct Fingerprinted<'a> {
    scene: &'a SceneSpec,
    data: &'a DataOptions,
    model: &'a ModelSpec,
    train: &'a TrainConfig,
    eval: &'a EvalOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.data.train_fraction) {
            return Err(Error::Config(format!(
                "data.train_fraction {} outside [0, 1]",
                self.data.train_fraction
            )));
        }
        if self.model.decoder.num_classes != self.scene.num_classes {
            return Err(Error::Config(format!(
                "model.decoder.num_classes {} differs from scene.num_classes {}",
                self.model.decoder.num_classes, self.scene.num_classes
            )));
        }
        Ok(())
    }

    /// Every seed in the document.
    pub fn set_seed(&mut self, seed: u64) {
        self.scene.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// Hex sha256 of the canonical JSON form, output paths excluded.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(&Fingerprinted {
            scene: &self.scene,
            data: &self.data,
            model: &self.model,
            train: &self.train,
            eval: &self.eval,
        })
        .expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.total_steps = 10;
        cfg.train.warmup_steps = 2;
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[train]\ntotal_stepz = 3\n").unwrap_err();
        assert!(err.to_string().contains("total_stepz"), "{err}");
    }

    #[test]
    fn fingerprint_ignores_paths_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.out_dir = "elsewhere".into();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.train.alpha = 0.2;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
