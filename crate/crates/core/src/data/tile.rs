use super::sample::BiTemporalSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Window origins along one axis: every `stride` from 0, plus a final window
/// flush with the far edge when the grid does not land on it.
pub fn tile_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + tile <= len).collect();
    if out.last().is_none_or(|&o| o + tile < len) {
        out.push(len - tile);
    }
    out
}

pub fn crop(t: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f32> {
    let s = t.shape();
    let (c, sh, sw) = (s[0], s[1], s[2]);
    debug_assert!(y0 + h <= sh && x0 + w <= sw);
    let d = t.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, r) = (i / (h * w), i % (h * w));
        d[ch * sh * sw + (y0 + r / w) * sw + x0 + r % w]
    })
}

/// Grid tiles of side `tile`, row-major; ids get an `_r<y>_c<x>` suffix.
pub fn tile(sample: &BiTemporalSample, tile: usize, stride: usize) -> Result<Vec<BiTemporalSample>> {
    let (h, w) = (sample.height(), sample.width());
    if tile == 0 || stride == 0 {
        return Err(Error::invalid("tile size and stride must be positive"));
    }
    if tile > h.min(w) {
        return Err(Error::invalid(format!(
            "tile {tile} larger than sample {} ({h}x{w})",
            sample.id
        )));
    }
    let mut out = Vec::new();
    for &y in &tile_origins(h, tile, stride) {
        for &x in &tile_origins(w, tile, stride) {
            out.push(BiTemporalSample::new(
                format!("{}_r{y}_c{x}", sample.id),
                sample.source,
                crop(&sample.image_a, y, x, tile, tile),
                crop(&sample.image_b, y, x, tile, tile),
                crop(&sample.mask, y, x, tile, tile),
            )?);
        }
    }
    Ok(out)
}
