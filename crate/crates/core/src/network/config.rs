use serde::{Deserialize, Serialize};

use crate::attention::CisaConfig;
use crate::enhance::afm::CHANNEL_REDUCTION;
use crate::enhance::SimamParams;
use crate::error::{Error, Result};

/// Whole-architecture description. Level `i` (1-based) has spatial side
/// `tile / 2^(i+1)` and `stage_channels[i-1]` channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsatConfig {
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub tile: usize,
    pub lambda_ratio: [f64; 3],
    pub normalize_lambdas: bool,
    pub qkv_kernel: usize,
    pub head_mid_channels: usize,
    pub simam_lambda: f64,
}

impl Default for LsatConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64, 128],
            stage_depths: vec![1, 1, 1, 1],
            tile: 64,
            lambda_ratio: [2.0, 1.0, 1.0],
            normalize_lambdas: true,
            qkv_kernel: 3,
            head_mid_channels: 16,
            simam_lambda: 1e-4,
        }
    }
}

impl LsatConfig {
    /// `[4, 8, 16, 32]` channels at tile 32: the smallest configuration used by
    /// gradient checks.
    pub fn tiny() -> Self {
        Self {
            stage_channels: vec![4, 8, 16, 32],
            tile: 32,
            head_mid_channels: 4,
            ..Self::default()
        }
    }

    /// `[8, 16, 32, 64]` channels at tile 64: the toy training configuration.
    pub fn toy() -> Self {
        Self {
            stage_channels: vec![8, 16, 32, 64],
            tile: 64,
            head_mid_channels: 8,
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial side of level `i` (0-based).
    pub fn level_side(&self, i: usize) -> usize {
        self.tile >> (i + 2)
    }

    pub fn cisa(&self, channels: usize) -> CisaConfig {
        CisaConfig {
            channels,
            lambda_ratio: self.lambda_ratio,
            normalize_lambdas: self.normalize_lambdas,
            qkv_kernel: self.qkv_kernel,
            ..CisaConfig::default()
        }
    }

    pub fn simam(&self) -> SimamParams {
        SimamParams {
            lambda_s: self.simam_lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n < 2 {
            return Err(Error::Config(format!(
                "stage_channels needs at least 2 stages, got {n}"
            )));
        }
        if self.stage_depths.len() != n {
            return Err(Error::Config(format!(
                "stage_depths has {} entries, stage_channels has {n}",
                self.stage_depths.len()
            )));
        }
        if self.stage_channels[0] == 0 || self.stage_channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "stage_channels must be positive and strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        let factor = 1usize << (n + 1);
        if self.tile == 0 || !self.tile.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "tile {} must be a positive multiple of 2^(stages+1) = {factor}",
                self.tile
            )));
        }
        // SAEM's SimAM needs at least two positions on every skip level
        if self.level_side(n - 2) < 2 {
            return Err(Error::Config(format!(
                "tile {} is too small: level {} would be 1x1",
                self.tile,
                n - 1
            )));
        }
        let deepest = self.stage_channels[n - 1];
        if !deepest.is_multiple_of(CHANNEL_REDUCTION) {
            return Err(Error::Config(format!(
                "deepest stage width {deepest} must be divisible by {CHANNEL_REDUCTION} for fusion gating"
            )));
        }
        if self.head_mid_channels == 0 {
            return Err(Error::Config("head_mid_channels must be positive".into()));
        }
        self.cisa(self.stage_channels[0]).validate()?;
        self.simam().validate()
    }
}
