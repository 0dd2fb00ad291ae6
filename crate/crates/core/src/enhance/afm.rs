//! Attention-based fusion of the deepest bi-temporal features:
//! concatenate, reduce with a 1x1 conv, then apply a squeeze-excitation style
//! channel gate followed by a (max, mean) spatial gate.

use crate::error::{Error, Result};
use crate::layers::Conv2dLayer;
use crate::tensor::{Element, ParamBuilder, PoolKind, Tape, Var};

pub const CHANNEL_REDUCTION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AfmWeights {
    pub fuse_reduce: Conv2dLayer,
    pub channel_down: Conv2dLayer,
    pub channel_up: Conv2dLayer,
    pub spatial_gate: Conv2dLayer,
    pub channels: usize,
}

impl AfmWeights {
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(CHANNEL_REDUCTION) {
            return Err(Error::Config(format!(
                "afm: channel count {channels} is not divisible by the reduction ratio {CHANNEL_REDUCTION}"
            )));
        }
        let hidden = channels / CHANNEL_REDUCTION;
        Ok(Self {
            fuse_reduce: Conv2dLayer::pointwise(b, "fuse_reduce", 2 * channels, channels)?,
            channel_down: Conv2dLayer::pointwise(b, "channel_gate.down", channels, hidden)?,
            channel_up: Conv2dLayer::pointwise(b, "channel_gate.up", hidden, channels)?,
            spatial_gate: Conv2dLayer::pointwise(b, "spatial_gate", 2, 1)?,
            channels,
        })
    }

    pub fn param_count(&self) -> usize {
        self.fuse_reduce.param_count()
            + self.channel_down.param_count()
            + self.channel_up.param_count()
            + self.spatial_gate.param_count()
    }
}

pub fn afm_forward<T: Element>(tape: &Tape<'_, T>, f1: &Var<T>, f2: &Var<T>, w: &AfmWeights) -> Result<Var<T>> {
    if f1.shape() != f2.shape() {
        return Err(Error::shape(format!(
            "afm: temporal inputs differ, {:?} vs {:?}",
            f1.shape(),
            f2.shape()
        )));
    }
    let g = w.fuse_reduce.forward(tape, &tape.concat(&[f1, f2], 1)?)?;

    let squeezed = tape.pool(&tape.pool(&g, 3, PoolKind::Avg)?, 2, PoolKind::Avg)?;
    let hidden = tape.relu(&w.channel_down.forward(tape, &squeezed)?);
    let channel_gate = tape.sigmoid(&w.channel_up.forward(tape, &hidden)?);

    let mx = tape.pool(&g, 1, PoolKind::Max)?;
    let av = tape.pool(&g, 1, PoolKind::Avg)?;
    let spatial_gate = tape.sigmoid(&w.spatial_gate.forward(tape, &tape.concat(&[&mx, &av], 1)?)?);

    tape.mul(&tape.mul(&g, &channel_gate)?, &spatial_gate)
}
