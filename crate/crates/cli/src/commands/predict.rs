use std::io::Write;
use std::path::Path;

use lsat_core::data::io::{load_rgb, save_gray};
use lsat_core::data::tile::{crop, tile_origins};
use lsat_core::enhance::dump_feature_map;
use lsat_core::network::{load_checkpoint, lsat_forward_detailed, LsatModel};
use lsat_core::tensor::kernels::sigmoid;
use lsat_core::{Tape, Tensor};

use crate::error::{CliError, CliResult};
use crate::PredictArgs;

/// Change probabilities `1 x H x W` for an image pair of any size at least
/// one tile wide: the pair is covered by a grid of model-sized tiles and
/// overlapping predictions are averaged.
pub fn predict_pair(model: &LsatModel<f32>, a: &Tensor<f32>, b: &Tensor<f32>) -> CliResult<Tensor<f32>> {
    if a.shape() != b.shape() {
        return Err(CliError::Runtime(format!(
            "images differ in size: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let t = model.config.tile;
    if h < t || w < t {
        return Err(CliError::Runtime(format!(
            "images are {h}x{w}, smaller than the model tile {t}"
        )));
    }
    let mut sum = vec![0.0f64; h * w];
    let mut hits = vec![0u32; h * w];
    for &y in &tile_origins(h, t, t) {
        for &x in &tile_origins(w, t, t) {
            let ta = crop(a, y, x, t, t).reshape(&[1, 3, t, t])?;
            let tb = crop(b, y, x, t, t).reshape(&[1, 3, t, t])?;
            let logits = model.predict_logits(&ta, &tb)?;
            for (i, &z) in logits.data().iter().enumerate() {
                let p = (y + i / t) * w + x + i % t;
                sum[p] += sigmoid(z as f64);
                hits[p] += 1;
            }
        }
    }
    Ok(Tensor::new(
        &[1, h, w],
        sum.iter().zip(&hits).map(|(s, &n)| (s / n as f64) as f32).collect(),
    )?)
}

/// Per-level encoder features, SAEM outputs and the AFM seed of the top-left
/// tile, one PNG per channel.
pub fn dump_features(model: &LsatModel<f32>, a: &Tensor<f32>, b: &Tensor<f32>, dir: &Path) -> CliResult<usize> {
    let t = model.config.tile;
    let ta = crop(a, 0, 0, t, t).reshape(&[1, 3, t, t])?;
    let tb = crop(b, 0, 0, t, t).reshape(&[1, 3, t, t])?;
    let tape = Tape::with_params(&model.params);
    let trace = lsat_forward_detailed(&tape, &tape.constant(ta), &tape.constant(tb), model)?;
    let mut written = 0;
    for (i, (f1, f2)) in trace.levels.iter().enumerate() {
        written += dump_feature_map(f1.value(), 0, dir, &format!("level{}_a", i + 1))?.len();
        written += dump_feature_map(f2.value(), 0, dir, &format!("level{}_b", i + 1))?.len();
    }
    for (i, s) in trace.saem.iter().enumerate() {
        written += dump_feature_map(s.f_diff.value(), 0, dir, &format!("saem{}_diff", i + 1))?.len();
        written += dump_feature_map(s.f_aggr.value(), 0, dir, &format!("saem{}_aggr", i + 1))?.len();
        written += dump_feature_map(s.f_out.value(), 0, dir, &format!("saem{}_out", i + 1))?.len();
    }
    written += dump_feature_map(trace.fused.value(), 0, dir, "afm")?.len();
    Ok(written)
}

pub fn run(args: &PredictArgs, out: &mut dyn Write) -> CliResult<()> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(CliError::Usage(format!(
            "--threshold must lie in (0, 1), got {}",
            args.threshold
        )));
    }
    let model = load_checkpoint::<f32>(&args.checkpoint)?;
    let a = load_rgb(&args.a)?;
    let b = load_rgb(&args.b)?;
    let probs = predict_pair(&model, &a, &b)?;
    let mask = probs.map(|p| if p as f64 >= args.threshold { 1.0 } else { 0.0 });
    save_gray(&args.out, &mask)?;
    if let Some(path) = &args.probabilities {
        save_gray(path, &probs)?;
    }
    if let Some(dir) = &args.dump_features {
        let n = dump_features(&model, &a, &b, dir)?;
        let _ = writeln!(out, "dumped {n} feature maps to {}", dir.display());
    }
    let changed = mask.data().iter().filter(|&&v| v == 1.0).count();
    let _ = writeln!(
        out,
        "{}: {}x{}, changed fraction {:.4}",
        args.out.display(),
        mask.shape()[1],
        mask.shape()[2],
        changed as f64 / mask.numel() as f64
    );
    Ok(())
}
