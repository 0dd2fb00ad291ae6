//! Synthetic bi-temporal scenes.
//!
//! Each sample draws a flat, gently shaded background and a set of coloured
//! objects for time A. Time B starts from the same objects and applies the
//! configured change operations: `remove` deletes an object, `add` places a
//! new one, `recolor` repaints an object without changing its footprint.
//! The mask marks pixels whose topmost object identity differs between the
//! two times, so recolouring is a pseudo-change that stays out of the mask.
//!
//! Rendering is integer-valued (8-bit levels); photometric jitter and noise
//! are applied in floating point and rounded back to 8-bit levels, so every
//! sample is exactly representable as PNG.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::raster::{ObjectKind, Shape};
use super::sample::{BiTemporalSample, Source};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeOp {
    Add,
    Remove,
    Recolor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub canvas: usize,
    /// Inclusive range of objects present at time A.
    pub n_objects: [usize; 2],
    /// Inclusive range of object extents in pixels.
    pub object_size: [usize; 2],
    pub kinds: Vec<ObjectKind>,
    pub change_ops: Vec<ChangeOp>,
    /// Probability that an existing object is changed, and the success
    /// probability of each of the `max_added` add attempts.
    pub change_prob: f64,
    pub max_added: usize,
    /// Additive brightness offset range applied to image B.
    pub brightness: [f64; 2],
    /// Contrast factor range applied to image B.
    pub contrast: [f64; 2],
    /// Gaussian noise standard deviation on both images, in `[0, 1]` units.
    pub noise_sigma: f64,
    /// When false, every object (including additions) keeps a clear
    /// bounding-box margin from all others, so a pixel changes exactly when
    /// it is background at one time and object at the other.
    pub allow_overlap: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            n_objects: [2, 4],
            object_size: [10, 22],
            kinds: vec![ObjectKind::Rectangle, ObjectKind::Ellipse, ObjectKind::Polygon],
            change_ops: vec![ChangeOp::Add, ChangeOp::Remove, ChangeOp::Recolor],
            change_prob: 0.5,
            max_added: 2,
            brightness: [-0.05, 0.05],
            contrast: [0.9, 1.1],
            noise_sigma: 0.01,
            allow_overlap: false,
            seed: 0,
        }
    }
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: &[T; 2]) -> Result<()> {
    if r[0] > r[1] {
        return Err(Error::Config(format!("synth.{name}: empty range {r:?}")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas < 16 {
            return Err(Error::Config(format!(
                "synth.canvas must be at least 16, got {}",
                self.canvas
            )));
        }
        check_range("n_objects", &self.n_objects)?;
        check_range("object_size", &self.object_size)?;
        check_range("brightness", &self.brightness)?;
        check_range("contrast", &self.contrast)?;
        if self.object_size[0] < 2 || self.object_size[1] > self.canvas {
            return Err(Error::Config(format!(
                "synth.object_size {:?} must lie within [2, canvas = {}]",
                self.object_size, self.canvas
            )));
        }
        let can_place = self.n_objects[1] > 0 || (self.change_ops.contains(&ChangeOp::Add) && self.max_added > 0);
        if self.kinds.is_empty() || !can_place {
            return Err(Error::Config(
                "synth: configuration can never place an object (no kinds, or no objects and no additions)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.change_prob) {
            return Err(Error::Config(format!(
                "synth.change_prob must be in [0, 1], got {}",
                self.change_prob
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.contrast[0] > 0.0) {
            return Err(Error::Config("synth: noise_sigma must be >= 0 and contrast > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Identity shared by both times; recolouring keeps it.
    pub id: u32,
    pub shape: Shape,
    pub color: [u8; 3],
}

/// Everything drawn for one sample, kept for geometry checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background: [u8; 3],
    pub before: Vec<SceneObject>,
    pub after: Vec<SceneObject>,
    pub brightness: f64,
    pub contrast: f64,
}

fn random_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    // saturated colours, kept away from the muted background band
    let hi = rng.random_range(150..=240u8);
    let lo = rng.random_range(20..=90u8);
    let mid = rng.random_range(lo..=hi);
    let mut c = [hi, mid, lo];
    for i in (1..3).rev() {
        let j = rng.random_range(0..=i);
        c.swap(i, j);
    }
    c
}

fn recolor(rng: &mut ChaCha8Rng, old: [u8; 3]) -> [u8; 3] {
    loop {
        let c = random_color(rng);
        let dist: i32 = c.iter().zip(&old).map(|(&a, &b)| (a as i32 - b as i32).abs()).sum();
        if dist >= 120 {
            return c;
        }
    }
}

/// Axis-aligned box `[x0, y0, x1, y1)` an object is drawn inside.
type BBox = [i64; 4];

const PLACEMENT_ATTEMPTS: usize = 32;
const PLACEMENT_MARGIN: i64 = 2;

fn boxes_clear(a: &BBox, b: &BBox) -> bool {
    a[2] + PLACEMENT_MARGIN <= b[0]
        || b[2] + PLACEMENT_MARGIN <= a[0]
        || a[3] + PLACEMENT_MARGIN <= b[1]
        || b[3] + PLACEMENT_MARGIN <= a[1]
}

fn random_box(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> BBox {
    let n = cfg.canvas as i64;
    let [lo, hi] = cfg.object_size;
    let w = rng.random_range(lo..=hi) as i64;
    let h = rng.random_range(lo..=hi) as i64;
    let x0 = rng.random_range(0..=n - w);
    let y0 = rng.random_range(0..=n - h);
    [x0, y0, x0 + w, y0 + h]
}

fn random_shape(rng: &mut ChaCha8Rng, cfg: &SynthConfig, kind: ObjectKind, bbox: BBox) -> Shape {
    let n = cfg.canvas as i64;
    let [x0, y0, x1, y1] = bbox;
    let (w, h) = (x1 - x0, y1 - y0);
    match kind {
        ObjectKind::Rectangle => Shape::Rectangle { x0, y0, w, h },
        ObjectKind::Ellipse => Shape::Ellipse {
            cx: x0 + w / 2,
            cy: y0 + h / 2,
            rx: (w / 2).max(1),
            ry: (h / 2).max(1),
        },
        ObjectKind::Polygon => {
            // convex-ish polygon: angularly sorted points on a jittered ellipse
            let k = rng.random_range(3..=6usize);
            let (cx, cy) = (x0 as f64 + w as f64 / 2.0, y0 as f64 + h as f64 / 2.0);
            let mut vertices = Vec::with_capacity(k);
            for i in 0..k {
                let t = (i as f64 + rng.random_range(0.0..0.6)) / k as f64 * std::f64::consts::TAU;
                let r = rng.random_range(0.75..=1.0);
                let vx = (cx + r * (w as f64 / 2.0) * t.cos()).round() as i64;
                let vy = (cy + r * (h as f64 / 2.0) * t.sin()).round() as i64;
                vertices.push((vx.clamp(0, n), vy.clamp(0, n)));
            }
            Shape::Polygon { vertices }
        }
    }
}

/// A new object, or `None` when no clear spot was found among `taken`.
fn random_object(rng: &mut ChaCha8Rng, cfg: &SynthConfig, id: u32, taken: &mut Vec<BBox>) -> Option<SceneObject> {
    let kind = cfg.kinds[rng.random_range(0..cfg.kinds.len())];
    let mut bbox = random_box(rng, cfg);
    if !cfg.allow_overlap {
        let mut attempts = 1;
        while !taken.iter().all(|t| boxes_clear(t, &bbox)) {
            if attempts == PLACEMENT_ATTEMPTS {
                return None;
            }
            bbox = random_box(rng, cfg);
            attempts += 1;
        }
        taken.push(bbox);
    }
    Some(SceneObject {
        id,
        shape: random_shape(rng, cfg, kind, bbox),
        color: random_color(rng),
    })
}

/// Draws the scene of sample `index`. Samples use independent ChaCha streams
/// of the configured seed, so any subset can be regenerated alone.
pub fn draw_scene(cfg: &SynthConfig, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let background = [
        rng.random_range(95..=125u8),
        rng.random_range(105..=135u8),
        rng.random_range(90..=120u8),
    ];
    let count = rng.random_range(cfg.n_objects[0]..=cfg.n_objects[1]);
    let mut taken = Vec::new();
    let before: Vec<SceneObject> = (0..count)
        .filter_map(|i| random_object(&mut rng, cfg, i as u32 + 1, &mut taken))
        .collect();
    let removable: Vec<ChangeOp> = cfg
        .change_ops
        .iter()
        .copied()
        .filter(|op| *op != ChangeOp::Add)
        .collect();
    let mut after = Vec::with_capacity(before.len());
    for obj in &before {
        let changed = !removable.is_empty() && rng.random_bool(cfg.change_prob);
        if !changed {
            after.push(obj.clone());
            continue;
        }
        match removable[rng.random_range(0..removable.len())] {
            ChangeOp::Remove => {}
            _ => after.push(SceneObject {
                color: recolor(&mut rng, obj.color),
                ..obj.clone()
            }),
        }
    }
    if cfg.change_ops.contains(&ChangeOp::Add) {
        let mut next = before.len() as u32 + 1;
        for _ in 0..cfg.max_added {
            if rng.random_bool(cfg.change_prob) {
                if let Some(obj) = random_object(&mut rng, cfg, next, &mut taken) {
                    after.push(obj);
                    next += 1;
                }
            }
        }
    }
    let brightness = rng.random_range(cfg.brightness[0]..=cfg.brightness[1]);
    let contrast = rng.random_range(cfg.contrast[0]..=cfg.contrast[1]);
    Scene {
        background,
        before,
        after,
        brightness,
        contrast,
    }
}

/// Topmost object id per pixel (0 = background).
pub fn occupancy(objects: &[SceneObject], canvas: usize) -> Vec<u32> {
    let mut occ = vec![0u32; canvas * canvas];
    for obj in objects {
        for (o, covered) in occ.iter_mut().zip(obj.shape.rasterize(canvas, canvas)) {
            if covered {
                *o = obj.id;
            }
        }
    }
    occ
}

/// Planar 8-bit RGB render.
fn render(scene: &Scene, objects: &[SceneObject], canvas: usize) -> Vec<u8> {
    let plane = canvas * canvas;
    let mut rgb = vec![0u8; 3 * plane];
    for y in 0..canvas {
        for x in 0..canvas {
            // gentle diagonal shading of at most +-8 levels
            let shade = ((x + y) * 16 / (2 * canvas)) as i32 - 8;
            for c in 0..3 {
                rgb[c * plane + y * canvas + x] = (scene.background[c] as i32 + shade).clamp(0, 255) as u8;
            }
        }
    }
    let occ = occupancy(objects, canvas);
    for (p, &id) in occ.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let obj = objects.iter().find(|o| o.id == id).expect("occupancy id");
        for c in 0..3 {
            rgb[c * plane + p] = obj.color[c];
        }
    }
    rgb
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn to_unit(rgb: &[u8]) -> Vec<f64> {
    rgb.iter().map(|&v| v as f64 / 255.0).collect()
}

fn add_noise(values: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in values.iter_mut() {
            *v += normal.sample(rng);
        }
    }
}

pub fn render_sample(cfg: &SynthConfig, index: u64, scene: &Scene) -> Result<BiTemporalSample> {
    let n = cfg.canvas;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e_6f69_7365);
    noise_rng.set_stream(index);
    let mut a = to_unit(&render(scene, &scene.before, n));
    let mut b: Vec<f64> = to_unit(&render(scene, &scene.after, n))
        .into_iter()
        .map(|v| (v - 0.5) * scene.contrast + 0.5 + scene.brightness)
        .collect();
    add_noise(&mut a, cfg.noise_sigma, &mut noise_rng);
    add_noise(&mut b, cfg.noise_sigma, &mut noise_rng);
    let occ_a = occupancy(&scene.before, n);
    let occ_b = occupancy(&scene.after, n);
    let mask: Vec<f32> = occ_a
        .iter()
        .zip(&occ_b)
        .map(|(x, y)| if x != y { 1.0 } else { 0.0 })
        .collect();
    BiTemporalSample::new(
        format!("synth_{index:05}"),
        Source::Synthetic,
        Tensor::new(&[3, n, n], a.into_iter().map(quantize).collect())?,
        Tensor::new(&[3, n, n], b.into_iter().map(quantize).collect())?,
        Tensor::new(&[1, n, n], mask)?,
    )
}

/// Samples `0..n` of the configured stream.
pub fn generate_synthetic(cfg: &SynthConfig, n: usize) -> Result<Vec<BiTemporalSample>> {
    generate_range(cfg, 0, n)
}

/// Samples `start..start + n`; disjoint ranges give disjoint datasets.
pub fn generate_range(cfg: &SynthConfig, start: u64, n: usize) -> Result<Vec<BiTemporalSample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::invalid("generate_synthetic needs n >= 1"));
    }
    (start..start + n as u64)
        .map(|i| render_sample(cfg, i, &draw_scene(cfg, i)))
        .collect()
}
