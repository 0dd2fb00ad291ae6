//! The run configuration: one TOML file with a section per component. Every
//! key is optional and falls back to its default; unknown keys are errors.
//!
//! ```toml
//! seed = 0
//! epochs = 300
//! batch_size = 2
//!
//! [model]
//! stage_channels = [8, 16, 32, 64]
//! head_mid_channels = 8
//!
//! [optim]
//! lr = 2e-3
//! ```

use std::fs;
use std::path::Path;

use lsat_core::data::{AugmentationConfig, SynthConfig};
use lsat_core::network::LsatConfig;
use lsat_core::train::{AdamWConfig, LossConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model initialisation and the per-epoch shuffle/augmentation streams.
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability at or above which a pixel counts as changed.
    pub threshold: f64,
    /// Train/val/test fractions for manifests written by `lsat synth`.
    pub split: [f64; 3],
    /// Apply `[augment]` to every training batch.
    pub augmentation: bool,
    pub model: LsatConfig,
    pub loss: LossConfig,
    pub optim: AdamWConfig,
    pub augment: AugmentationConfig,
    /// Synthetic data; its own `seed` picks the scene stream.
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 300,
            batch_size: 4,
            threshold: 0.5,
            split: [0.8, 0.1, 0.1],
            augmentation: true,
            model: LsatConfig::default(),
            loss: LossConfig::default(),
            optim: AdamWConfig::default(),
            augment: AugmentationConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`; `None` gives the validated defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => {
                let cfg = Self::default();
                cfg.validate()?;
                Ok(cfg)
            }
            Some(p) => {
                let text =
                    fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| match e {
                    CliError::Config(msg) => CliError::Config(format!("{}: {msg}", p.display())),
                    other => other,
                })
            }
        }
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        let sections = [
            ("model", self.model.validate()),
            ("loss", self.loss.validate()),
            ("optim", self.optim.validate()),
            ("augment", self.augment.validate()),
            ("synth", self.synth.validate()),
        ];
        for (name, result) in sections {
            if let Err(e) = result {
                problems.push(format!("[{name}] {e}"));
            }
        }
        if self.epochs == 0 {
            problems.push("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            problems.push(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            problems.push(format!(
                "split fractions must be in [0, 1] and sum to 1, got {:?}",
                self.split
            ));
        }
        if let Some(side) = self.augment.crop {
            if self.augmentation && side != self.model.tile {
                problems.push(format!(
                    "[augment] crop {side} must equal model.tile {} so crops fit the network",
                    self.model.tile
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems.join("; ")))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
