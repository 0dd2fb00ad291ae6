//! Geometric and photometric augmentation. Geometry (right-angle rotation,
//! flips, crop) is applied identically to both images and the mask, so masks
//! stay binary; photometric jitter touches the images only. Swapping the two
//! acquisition times leaves the change mask unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::BiTemporalSample;
use super::tile::crop;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Allowed counter-clockwise rotations in degrees, from {0, 90, 180, 270}.
    pub rotations: Vec<u16>,
    pub hflip: bool,
    pub vflip: bool,
    /// Output side of the random square crop; `None` keeps the full sample.
    pub crop: Option<usize>,
    /// Additive brightness range for the images.
    pub brightness: [f64; 2],
    /// Contrast factor range for the images.
    pub contrast: [f64; 2],
    /// Exchange image A and image B with probability 1/2.
    pub swap_temporal: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotations: vec![0, 90, 180, 270],
            hflip: true,
            vflip: true,
            crop: None,
            brightness: [-0.05, 0.05],
            contrast: [0.9, 1.1],
            swap_temporal: true,
        }
    }
}

impl AugmentationConfig {
    /// Leaves every sample unchanged.
    pub fn identity() -> Self {
        Self {
            rotations: vec![0],
            hflip: false,
            vflip: false,
            crop: None,
            brightness: [0.0, 0.0],
            contrast: [1.0, 1.0],
            swap_temporal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotations.is_empty() || self.rotations.iter().any(|r| ![0, 90, 180, 270].contains(r)) {
            return Err(Error::Config(format!(
                "augment.rotations must be a non-empty subset of [0, 90, 180, 270], got {:?}",
                self.rotations
            )));
        }
        if self.crop == Some(0) {
            return Err(Error::Config("augment.crop must be positive".into()));
        }
        if self.brightness[0] > self.brightness[1] || self.contrast[0] > self.contrast[1] || self.contrast[0] <= 0.0 {
            return Err(Error::Config(format!(
                "augment: invalid jitter ranges brightness {:?}, contrast {:?}",
                self.brightness, self.contrast
            )));
        }
        Ok(())
    }
}

/// One counter-clockwise quarter turn of every channel.
pub fn rot90(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    // output is w x h; out[i][j] = in[j][w - 1 - i]
    Tensor::from_fn(&[c, w, h], |k| {
        let (ch, r) = (k / (w * h), k % (w * h));
        let (i, j) = (r / h, r % h);
        d[ch * h * w + j * w + (w - 1 - i)]
    })
}

pub fn flip_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Tensor::from_fn(s, |k| {
        let (plane, r) = (k / (h * w), k % (h * w));
        d[plane * h * w + (r / w) * w + (w - 1 - r % w)]
    })
}

pub fn flip_vertical(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Tensor::from_fn(s, |k| {
        let (plane, r) = (k / (h * w), k % (h * w));
        d[plane * h * w + (h - 1 - r / w) * w + r % w]
    })
}

/// The geometric part of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
    /// `(y0, x0, side)` after rotation and flips.
    pub crop: Option<(usize, usize, usize)>,
}

impl Geometry {
    pub fn apply(&self, t: &Tensor<f32>) -> Tensor<f32> {
        let mut out = t.clone();
        for _ in 0..self.quarter_turns {
            out = rot90(&out);
        }
        if self.hflip {
            out = flip_horizontal(&out);
        }
        if self.vflip {
            out = flip_vertical(&out);
        }
        if let Some((y, x, side)) = self.crop {
            out = crop(&out, y, x, side, side);
        }
        out
    }
}

fn jitter(t: &Tensor<f32>, brightness: f64, contrast: f64) -> Tensor<f32> {
    t.map(|v| (((v as f64 - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0)) as f32)
}

pub fn augment(sample: &BiTemporalSample, cfg: &AugmentationConfig, seed: u64) -> Result<BiTemporalSample> {
    cfg.validate()?;
    let (h, w) = (sample.height(), sample.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deg = cfg.rotations[rng.random_range(0..cfg.rotations.len())];
    let quarter_turns = (deg / 90) as u8;
    let (rh, rw) = if quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
    let hflip = cfg.hflip && rng.random_bool(0.5);
    let vflip = cfg.vflip && rng.random_bool(0.5);
    let crop = match cfg.crop {
        None => None,
        Some(side) if side > rh.min(rw) => {
            return Err(Error::invalid(format!(
                "crop {side} exceeds sample {} ({h}x{w})",
                sample.id
            )))
        }
        Some(side) => Some((rng.random_range(0..=rh - side), rng.random_range(0..=rw - side), side)),
    };
    let geo = Geometry {
        quarter_turns,
        hflip,
        vflip,
        crop,
    };
    let b = rng.random_range(cfg.brightness[0]..=cfg.brightness[1]);
    let c = rng.random_range(cfg.contrast[0]..=cfg.contrast[1]);
    let photometric = |t: Tensor<f32>| if b == 0.0 && c == 1.0 { t } else { jitter(&t, b, c) };
    let (first, second) = if cfg.swap_temporal && rng.random_bool(0.5) {
        (&sample.image_b, &sample.image_a)
    } else {
        (&sample.image_a, &sample.image_b)
    };
    BiTemporalSample::new(
        sample.id.clone(),
        sample.source,
        photometric(geo.apply(first)),
        photometric(geo.apply(second)),
        geo.apply(&sample.mask),
    )
}
