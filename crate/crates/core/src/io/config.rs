//! Run configuration: one JSON document with a section per concern.
//!
//! ```json
//! {
//!   "synth": { "n_samples": 1000, "positive_fraction": 0.5, "image_size": 64,
//!              "ppe": { "name": "helmet", "crop_band": [0.0, 0.4],
//!                       "joints_of_interest": ["head_top", "head"], "margin": 0.1 },
//!              "distractor_probability": 0.5, "noise_amplitude": 0.1, "seed": 0 },
//!   "train": { "lambda": 0.5, "learning_rate": 0.0001, "batch_size": 32,
//!              "max_epochs": 150, "patience": 10, "seed": 0,
//!              "variant": "super_sam", "bce_epsilon": 1e-7 },
//!   "split_ratios": [0.7, 0.15, 0.15],
//!   "paths": { "data_dir": null, "checkpoint": null, "report": null }
//! }
//! ```
//!
//! Every key is optional and unknown keys are rejected. The PPE type used
//! for supervision is `synth.ppe`.

use super::{format_err, read_json, write_json, Result};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const DEFAULT_SPLIT: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub split_ratios: [f64; 3],
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            split_ratios: DEFAULT_SPLIT,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let c: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = read_json(path)?;
        c.validate().map_err(|m| format_err(path, m))?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.synth.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|&r| !(r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(format!("split_ratios must be positive and sum to 1, got {:?}", self.split_ratios));
        }
        Ok(())
    }

    /// Uses `seed` for both data generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Variant;

    #[test]
    fn defaults_materialized() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        let text = serde_json::to_string(&c).unwrap();
        for key in ["positive_fraction", "distractor_probability", "learning_rate", "patience", "joints_of_interest", "margin", "split_ratios"] {
            assert!(text.contains(key), "{key} missing from {text}");
        }
    }

    #[test]
    fn partial_sections() {
        let c = RunConfig::from_json(r#"{"train": {"variant": "plain", "max_epochs": 2}, "synth": {"n_samples": 50}}"#).unwrap();
        assert_eq!(c.train.variant, Variant::Plain);
        assert_eq!(c.train.lambda, 0.5);
        assert_eq!(c.synth.n_samples, 50);
        assert_eq!(c.synth.ppe.name, "helmet");
    }

    #[test]
    fn typos_and_bad_values_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lamda": 0.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"synth": {"ppe": {"name": "x", "crop_band": [0, 1], "joints_of_interest": ["head"], "colour": 1}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"split_ratios": [0.5, 0.5, 0.5]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lambda": 2}}"#).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let c = RunConfig::default().with_seed(7);
        c.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), c);
    }
}
