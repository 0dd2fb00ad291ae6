//! Writes feature maps as one grayscale PNG per channel.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Dumps batch item `batch` of a `B x C x H x W` map to
/// `<dir>/<prefix>_c<ch>.png`, each channel min-max scaled to 0..255
/// (constant channels become 0).
pub fn dump_feature_map<T: Element>(t: &Tensor<T>, batch: usize, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let &[b, c, h, w] = t.shape() else {
        return Err(Error::shape(format!("feature dump expects BCHW, got {:?}", t.shape())));
    };
    if batch >= b {
        return Err(Error::invalid(format!("batch index {batch} out of range for {b}")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plane = h * w;
    let mut paths = Vec::with_capacity(c);
    for ch in 0..c {
        let start = (batch * c + ch) * plane;
        let vals: Vec<f64> = t.data()[start..start + plane].iter().map(|v| v.to_f64()).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let pixels: Vec<u8> = vals
            .iter()
            .map(|&v| {
                if span > 0.0 && span.is_finite() {
                    ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        let img = GrayImage::from_raw(w as u32, h as u32, pixels).expect("plane size");
        let path = dir.join(format!("{prefix}_c{ch:03}.png"));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
        paths.push(path);
    }
    Ok(paths)
}
