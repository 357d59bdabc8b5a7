//! Run configuration: one JSON document with a flat section per module.
//!
//! Every field has a default, so `{}` is a complete configuration. Individual
//! keys can be overridden with dotted paths such as `train.dnn1_epochs=2`.
//! The hash of the fully resolved configuration is stamped on every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::losses::{MultitaskLossConfig, WeightedLossConfig};
use crate::synth::BenchmarkSpec;
use crate::train::TrainConfig;

/// Artifact locations. Relative entries resolve against `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    /// Dataset manifest; synthesized audio is written next to it.
    pub manifest: PathBuf,
    pub model: PathBuf,
    pub thresholds: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            manifest: PathBuf::from("data/manifest.json"),
            model: PathBuf::from("model.bin"),
            thresholds: PathBuf::from("thresholds.json"),
        }
    }
}

impl PathsConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.manifest)
    }

    pub fn model_path(&self) -> PathBuf {
        self.resolve(&self.model)
    }

    pub fn thresholds_path(&self) -> PathBuf {
        self.resolve(&self.thresholds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub folds: usize,
    pub grid_step: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            folds: 9,
            grid_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Spacing of the truncation grid for online curves, in event frames.
    pub k_step: usize,
    pub write_svg: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            k_step: 10,
            write_svg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: BenchmarkSpec,
    pub features: FeatureConfig,
    pub weighted_loss: WeightedLossConfig,
    pub multitask_loss: MultitaskLossConfig,
    pub train: TrainConfig,
    pub calibration: CalibrationConfig,
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    /// Parses a config file; relative `out_dir` resolves against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if cfg.paths.out_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.paths.out_dir = base.join(&cfg.paths.out_dir);
        }
        Ok(cfg)
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when they
    /// can and are taken as strings otherwise.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut tree = serde_json::to_value(&*self)?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{raw}` is not key=value")))?;
            let mut node = &mut tree;
            for part in key.split('.') {
                node = match node {
                    Value::Object(map) => map.get_mut(part),
                    Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                    _ => None,
                }
                .ok_or_else(|| Error::config(format!("unknown config key `{key}`")))?;
            }
            *node = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        }
        *self = serde_json::from_value(tree).map_err(|e| Error::config(format!("override rejected: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.weighted_loss.validate()?;
        self.multitask_loss.validate()?;
        self.train.validate()?;
        if self.calibration.folds == 0 {
            return Err(Error::config("calibration.folds must be >= 1"));
        }
        crate::eval::threshold_grid(self.calibration.grid_step)?;
        if self.evaluation.k_step == 0 {
            return Err(Error::config("evaluation.k_step must be >= 1"));
        }
        let s = &self.synth;
        if s.train_streams == 0 || s.test_streams == 0 {
            return Err(Error::config("synth.train_streams and synth.test_streams must be >= 1"));
        }
        if s.classes.is_empty() {
            return Err(Error::config("synth.classes must list at least one class"));
        }
        if s.classes.iter().any(|c| c.name.is_empty() || c.name.contains(char::is_whitespace)) {
            return Err(Error::config("synth.classes names must be non-empty without whitespace"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, first 16 hex digits. Artifact
    /// locations (`paths`) are left out, so moving a run keeps its hash.
    pub fn hash(&self) -> String {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut tree {
            map.remove("paths");
        }
        let json = serde_json::to_vec(&tree).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
