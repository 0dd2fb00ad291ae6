//! PNG datasets laid out as `A/<id>.png`, `B/<id>.png`, `label/<id>.png`.
//! Labels are single-channel 8-bit with values 0 (no change) and 255 (change).

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};

use super::sample::{BiTemporalSample, Source};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DIR_A: &str = "A";
pub const DIR_B: &str = "B";
pub const DIR_LABEL: &str = "label";

pub fn sample_paths(root: &Path, id: &str) -> [PathBuf; 3] {
    let file = format!("{id}.png");
    [
        root.join(DIR_A).join(&file),
        root.join(DIR_B).join(&file),
        root.join(DIR_LABEL).join(&file),
    ]
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::Data {
            path: path.to_path_buf(),
            message: "file not found".into(),
        });
    }
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    Ok(rgb_to_tensor(&open(path)?.to_rgb8()))
}

pub fn load_label(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?;
    if img.color().channel_count() != 1 {
        return Err(Error::Data {
            path: path.to_path_buf(),
            message: format!("label must be single-channel, found {:?}", img.color()),
        });
    }
    let gray = img.to_luma8();
    if let Some(bad) = gray.as_raw().iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::Data {
            path: path.to_path_buf(),
            message: format!("label value {bad} is neither 0 nor 255"),
        });
    }
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Tensor::new(
        &[1, h, w],
        gray.as_raw()
            .iter()
            .map(|&v| if v == 255 { 1.0 } else { 0.0 })
            .collect(),
    )
}

fn dims(t: &Tensor<f32>) -> (usize, usize) {
    let s = t.shape();
    (s[2], s[1])
}

pub fn load_sample(root: &Path, id: &str) -> Result<BiTemporalSample> {
    let [pa, pb, pl] = sample_paths(root, id);
    let a = load_rgb(&pa)?;
    let b = load_rgb(&pb)?;
    let m = load_label(&pl)?;
    for (other, path) in [(&b, &pb), (&m, &pl)] {
        if dims(other) != dims(&a) {
            let ((wa, ha), (wo, ho)) = (dims(&a), dims(other));
            return Err(Error::Data {
                path: path.clone(),
                message: format!("size {wo}x{ho} differs from {} size {wa}x{ha}", pa.display()),
            });
        }
    }
    BiTemporalSample::new(id, Source::Disk, a, b, m)
}

/// Sorted ids of every `A/*.png` with matching `B/` and `label/` files.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join(DIR_A);
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if sample_paths(root, stem).iter().all(|p| p.is_file()) {
                    ids.push(stem.to_string());
                }
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let (h, w) = match t.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::shape(format!("expected 3 x H x W image, got {s:?}"))),
    };
    let d = t.data();
    let plane = h * w;
    let mut raw = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            raw.push(to_u8(d[c * plane + p]));
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from shape"))
}

/// `1 x H x W` map in `[0, 1]` as 8-bit grayscale.
pub fn gray_image(t: &Tensor<f32>) -> Result<GrayImage> {
    let (h, w) = match t.shape() {
        &[1, h, w] => (h, w),
        s => return Err(Error::shape(format!("expected 1 x H x W map, got {s:?}"))),
    };
    Ok(
        GrayImage::from_raw(w as u32, h as u32, t.data().iter().map(|&v| to_u8(v)).collect())
            .expect("buffer sized from shape"),
    )
}

fn write_png(path: &Path, save: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_rgb(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let img = rgb_image(t)?;
    write_png(path, |p| img.save(p))
}

pub fn save_gray(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let img = gray_image(t)?;
    write_png(path, |p| img.save(p))
}

pub fn save_sample(root: &Path, s: &BiTemporalSample) -> Result<[PathBuf; 3]> {
    let paths = sample_paths(root, &s.id);
    save_rgb(&paths[0], &s.image_a)?;
    save_rgb(&paths[1], &s.image_b)?;
    save_gray(&paths[2], &s.mask)?;
    Ok(paths)
}
