//! Siamese U-shaped change detector.
//!
//! ```text
//! xa, xb ──stem(4x4/4)──► level 1 ──down(2x2/2)──► level 2 ── ... ──► level L
//!            (shared weights for both temporal inputs)
//! levels 1..L-1: SAEM(f1_i, f2_i) ──► skip_i
//! level L:       AFM(f1_L, f2_L)  ──► seed
//! decoder, i = L-1..1: up2x ─► concat skip_i ─► 1x1 merge ─► CISA block
//! head: up2x ─► up2x ─► 3x3 conv ─► relu ─► 1x1 conv ─► logits (B x 1 x tile x tile)
//! ```

use super::config::LsatConfig;
use crate::attention::{block_forward, BlockWeights};
use crate::enhance::{afm_forward, saem_forward_detailed, AfmWeights, SaemOutputs, SaemWeights};
use crate::error::{Error, Result};
use crate::layers::Conv2dLayer;
use crate::tensor::{seeded_rng, Conv2dSpec, Element, ParamBuilder, ParamStore, Tape, Tensor, Var};

pub const STEM_PATCH: usize = 4;
pub const DOWNSAMPLE: usize = 2;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStage {
    /// Stem for the first stage, stride-2 reduction for the others.
    pub downsample: Conv2dLayer,
    pub blocks: Vec<BlockWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLevel {
    pub merge: Conv2dLayer,
    pub block: BlockWeights,
}

/// Parameter handles of every submodule; values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct LsatArch {
    pub stages: Vec<EncoderStage>,
    /// One per skip level, shallowest first (`L - 1` entries).
    pub saems: Vec<SaemWeights>,
    pub afm: AfmWeights,
    /// Shallowest first; `decoder[i]` produces level `i`.
    pub decoder: Vec<DecoderLevel>,
    pub head_conv: Conv2dLayer,
    pub head_out: Conv2dLayer,
}

impl LsatArch {
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, cfg: &LsatConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.stage_channels;
        let n = ch.len();
        let mut stages = Vec::with_capacity(n);
        for i in 0..n {
            let downsample = if i == 0 {
                let spec = Conv2dSpec {
                    stride: STEM_PATCH,
                    ..Conv2dSpec::default()
                };
                Conv2dLayer::build(b, "stem", INPUT_CHANNELS, ch[0], STEM_PATCH, spec)?
            } else {
                let spec = Conv2dSpec {
                    stride: DOWNSAMPLE,
                    ..Conv2dSpec::default()
                };
                let name = format!("encoder.stage{}.downsample", i + 1);
                Conv2dLayer::build(b, &name, ch[i - 1], ch[i], DOWNSAMPLE, spec)?
            };
            let blocks = (0..cfg.stage_depths[i])
                .map(|j| {
                    let name = format!("encoder.stage{}.block{}", i + 1, j + 1);
                    BlockWeights::build(&mut b.scope(&name), &cfg.cisa(ch[i]))
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(EncoderStage { downsample, blocks });
        }
        let saems = (0..n - 1)
            .map(|i| SaemWeights::build(&mut b.scope(&format!("saem{}", i + 1)), ch[i]))
            .collect::<Result<Vec<_>>>()?;
        let afm = AfmWeights::build(&mut b.scope("afm"), ch[n - 1])?;
        let mut decoder = Vec::with_capacity(n - 1);
        for i in (0..n - 1).rev() {
            let mut s = b.scope(&format!("decoder.level{}", i + 1));
            let merge = Conv2dLayer::pointwise(&mut s, "merge", ch[i + 1] + ch[i], ch[i])?;
            let block = BlockWeights::build(&mut s.scope("block"), &cfg.cisa(ch[i]))?;
            decoder.push(DecoderLevel { merge, block });
        }
        decoder.reverse();
        let head_conv = Conv2dLayer::same(b, "head.conv", ch[0], cfg.head_mid_channels, 3)?;
        let head_out = Conv2dLayer::pointwise(b, "head.out", cfg.head_mid_channels, 1)?;
        Ok(Self {
            stages,
            saems,
            afm,
            decoder,
            head_conv,
            head_out,
        })
    }
}

/// Architecture, its parameters, and the seed they were drawn from.
#[derive(Debug, Clone)]
pub struct LsatModel<T: Element> {
    pub config: LsatConfig,
    pub seed: u64,
    pub arch: LsatArch,
    pub params: ParamStore<T>,
}

impl<T: Element> LsatModel<T> {
    pub fn new(config: LsatConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let arch = LsatArch::build(&mut ParamBuilder::new(&mut params, &mut rng), &config)?;
        Ok(Self {
            config,
            seed,
            arch,
            params,
        })
    }

    /// Same architecture and parameter values at another precision.
    pub fn cast<U: Element>(&self) -> LsatModel<U> {
        LsatModel {
            config: self.config.clone(),
            seed: self.seed,
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Inference without gradient bookkeeping for the caller.
    pub fn predict_logits(&self, xa: &Tensor<T>, xb: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::with_params(&self.params);
        let a = tape.constant(xa.clone());
        let b = tape.constant(xb.clone());
        Ok(lsat_forward(&tape, &a, &b, self)?.value().clone())
    }
}

fn check_input<T: Element>(x: &Var<T>, cfg: &LsatConfig) -> Result<()> {
    match x.shape() {
        &[_, c, h, w] if c == INPUT_CHANNELS && h == cfg.tile && w == cfg.tile => Ok(()),
        s => Err(Error::shape(format!(
            "expected input B x {INPUT_CHANNELS} x {t} x {t}, got {s:?}",
            t = cfg.tile
        ))),
    }
}

/// Per-level features of one temporal input, shallowest first.
pub fn encode<T: Element>(tape: &Tape<'_, T>, x: &Var<T>, m: &LsatModel<T>) -> Result<Vec<Var<T>>> {
    check_input(x, &m.config)?;
    let mut levels = Vec::with_capacity(m.arch.stages.len());
    let mut h = x.clone();
    for stage in &m.arch.stages {
        h = stage.downsample.forward(tape, &h)?;
        for block in &stage.blocks {
            h = block_forward(tape, &h, block)?;
        }
        levels.push(h.clone());
    }
    Ok(levels)
}

/// Both temporal inputs through the one shared encoder.
pub fn encode_siamese<T: Element>(
    tape: &Tape<'_, T>,
    xa: &Var<T>,
    xb: &Var<T>,
    m: &LsatModel<T>,
) -> Result<Vec<(Var<T>, Var<T>)>> {
    if xa.shape() != xb.shape() {
        return Err(Error::shape(format!(
            "temporal inputs differ in shape: {:?} vs {:?}",
            xa.shape(),
            xb.shape()
        )));
    }
    let fa = encode(tape, xa, m)?;
    let fb = encode(tape, xb, m)?;
    Ok(fa.into_iter().zip(fb).collect())
}

/// Decoder and head. `skips` holds the SAEM outputs of levels `1..L-1`
/// (shallowest first), `fused` the AFM output at level `L`.
pub fn decode<T: Element>(tape: &Tape<'_, T>, skips: &[Var<T>], fused: &Var<T>, m: &LsatModel<T>) -> Result<Var<T>> {
    let cfg = &m.config;
    let n = cfg.num_stages();
    if skips.len() != n - 1 {
        return Err(Error::shape(format!(
            "decode expects {} skips, got {}",
            n - 1,
            skips.len()
        )));
    }
    let expect = |v: &Var<T>, level: usize, what: &str| -> Result<()> {
        let (c, s) = (cfg.stage_channels[level], cfg.level_side(level));
        match v.shape() {
            &[_, vc, vh, vw] if vc == c && vh == s && vw == s => Ok(()),
            other => Err(Error::shape(format!(
                "decode: {what} at level {} should be B x {c} x {s} x {s}, got {other:?}",
                level + 1
            ))),
        }
    };
    expect(fused, n - 1, "fused features")?;
    let mut h = fused.clone();
    for i in (0..n - 1).rev() {
        expect(&skips[i], i, "skip")?;
        let up = tape.upsample_bilinear2x(&h)?;
        let cat = tape.concat(&[&up, &skips[i]], 1)?;
        let level = &m.arch.decoder[i];
        h = block_forward(tape, &level.merge.forward(tape, &cat)?, &level.block)?;
    }
    let up = tape.upsample_bilinear2x(&tape.upsample_bilinear2x(&h)?)?;
    let mid = tape.relu(&m.arch.head_conv.forward(tape, &up)?);
    m.arch.head_out.forward(tape, &mid)
}

/// Every intermediate of one forward pass.
pub struct LsatTrace<T> {
    pub levels: Vec<(Var<T>, Var<T>)>,
    pub saem: Vec<SaemOutputs<T>>,
    pub fused: Var<T>,
    pub logits: Var<T>,
}

pub fn lsat_forward_detailed<T: Element>(
    tape: &Tape<'_, T>,
    xa: &Var<T>,
    xb: &Var<T>,
    m: &LsatModel<T>,
) -> Result<LsatTrace<T>> {
    let levels = encode_siamese(tape, xa, xb, m)?;
    let simam = m.config.simam();
    let n = levels.len();
    let saem = levels[..n - 1]
        .iter()
        .zip(&m.arch.saems)
        .map(|((f1, f2), w)| saem_forward_detailed(tape, f1, f2, w, &simam))
        .collect::<Result<Vec<_>>>()?;
    let (d1, d2) = &levels[n - 1];
    let fused = afm_forward(tape, d1, d2, &m.arch.afm)?;
    let skips: Vec<Var<T>> = saem.iter().map(|s| s.f_out.clone()).collect();
    let logits = decode(tape, &skips, &fused, m)?;
    Ok(LsatTrace {
        levels,
        saem,
        fused,
        logits,
    })
}

/// Change logits for a bi-temporal pair, `B x 1 x tile x tile`.
pub fn lsat_forward<T: Element>(tape: &Tape<'_, T>, xa: &Var<T>, xb: &Var<T>, m: &LsatModel<T>) -> Result<Var<T>> {
    Ok(lsat_forward_detailed(tape, xa, xb, m)?.logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_names_are_scoped() {
        let m = LsatModel::<f32>::new(LsatConfig::tiny(), 0).unwrap();
        for name in [
            "stem.weight",
            "encoder.stage2.downsample.bias",
            "encoder.stage4.block1.cisa.log_temperature",
            "saem3.conv_pre.weight",
            "afm.channel_gate.down.weight",
            "decoder.level1.merge.weight",
            "decoder.level3.block.ffn.reduce.bias",
            "head.out.weight",
        ] {
            assert!(m.params.id_of(name).is_some(), "missing {name}");
        }
        assert!(m.params.id_of("saem4.conv_pre.weight").is_none());
    }

    #[test]
    fn wrong_tile_rejected() {
        let m = LsatModel::<f32>::new(LsatConfig::tiny(), 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        assert!(m.predict_logits(&x, &x).is_err());
    }
}
