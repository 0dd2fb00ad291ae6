//! Structure-aware enhancement between encoder and decoder.
//!
//! With `C3` a shared 3x3 convolution and `M` SimAM:
//!
//! ```text
//! f_diff = M(|M(C3 f1) - M(C3 f2)|)
//! f_a1   = reduce(C3 f1 + C3 f2)
//! f_a2   = M(concat_reduce([C3 f1 ; C3 f2]))
//! f_aggr = M(f_a1 + M(f_a2))
//! f_out  = f_diff + f_aggr
//! ```

use super::simam::{simam, SimamParams};
use crate::error::{Error, Result};
use crate::layers::Conv2dLayer;
use crate::tensor::{Element, ParamBuilder, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaemWeights {
    /// 3x3 C->C, applied to both temporal inputs.
    pub conv_pre: Conv2dLayer,
    /// 1x1 C->C closing the additive pathway.
    pub reduce_1x1: Conv2dLayer,
    /// 1x1 2C->C after concatenation.
    pub concat_reduce: Conv2dLayer,
    pub channels: usize,
}

impl SaemWeights {
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self {
            conv_pre: Conv2dLayer::same(b, "conv_pre", channels, channels, 3)?,
            reduce_1x1: Conv2dLayer::pointwise(b, "reduce_1x1", channels, channels)?,
            concat_reduce: Conv2dLayer::pointwise(b, "concat_reduce", 2 * channels, channels)?,
            channels,
        })
    }

    pub fn param_count(&self) -> usize {
        self.conv_pre.param_count() + self.reduce_1x1.param_count() + self.concat_reduce.param_count()
    }
}

fn check_pair<T: Element>(f1: &Var<T>, f2: &Var<T>, c: usize, what: &str) -> Result<()> {
    if f1.shape() != f2.shape() {
        return Err(Error::shape(format!(
            "{what}: temporal inputs differ, {:?} vs {:?}",
            f1.shape(),
            f2.shape()
        )));
    }
    match f1.shape() {
        [_, ch, _, _] if *ch == c => Ok(()),
        s => Err(Error::shape(format!("{what}: expected B x {c} x H x W, got {s:?}"))),
    }
}

/// Both temporal inputs after the shared 3x3 convolution.
pub fn pre_conv<T: Element>(tape: &Tape<'_, T>, f1: &Var<T>, f2: &Var<T>, w: &SaemWeights) -> Result<(Var<T>, Var<T>)> {
    check_pair(f1, f2, w.channels, "saem")?;
    Ok((w.conv_pre.forward(tape, f1)?, w.conv_pre.forward(tape, f2)?))
}

fn diff_from_conv<T: Element>(tape: &Tape<'_, T>, c1: &Var<T>, c2: &Var<T>, p: &SimamParams) -> Result<Var<T>> {
    let d = tape.sub(&simam(tape, c1, p)?, &simam(tape, c2, p)?)?;
    simam(tape, &tape.abs(&d), p)
}

fn add_from_conv<T: Element>(tape: &Tape<'_, T>, c1: &Var<T>, c2: &Var<T>, w: &SaemWeights) -> Result<Var<T>> {
    w.reduce_1x1.forward(tape, &tape.add(c1, c2)?)
}

fn concat_from_conv<T: Element>(
    tape: &Tape<'_, T>,
    c1: &Var<T>,
    c2: &Var<T>,
    w: &SaemWeights,
    p: &SimamParams,
) -> Result<Var<T>> {
    let cat = tape.concat(&[c1, c2], 1)?;
    simam(tape, &w.concat_reduce.forward(tape, &cat)?, p)
}

pub fn diff_refine<T: Element>(
    tape: &Tape<'_, T>,
    f1: &Var<T>,
    f2: &Var<T>,
    w: &SaemWeights,
    p: &SimamParams,
) -> Result<Var<T>> {
    let (c1, c2) = pre_conv(tape, f1, f2, w)?;
    diff_from_conv(tape, &c1, &c2, p)
}

pub fn aggr_path_add<T: Element>(tape: &Tape<'_, T>, f1: &Var<T>, f2: &Var<T>, w: &SaemWeights) -> Result<Var<T>> {
    let (c1, c2) = pre_conv(tape, f1, f2, w)?;
    add_from_conv(tape, &c1, &c2, w)
}

pub fn aggr_path_concat<T: Element>(
    tape: &Tape<'_, T>,
    f1: &Var<T>,
    f2: &Var<T>,
    w: &SaemWeights,
    p: &SimamParams,
) -> Result<Var<T>> {
    let (c1, c2) = pre_conv(tape, f1, f2, w)?;
    concat_from_conv(tape, &c1, &c2, w, p)
}

pub fn detail_aggregate<T: Element>(
    tape: &Tape<'_, T>,
    f_a1: &Var<T>,
    f_a2: &Var<T>,
    p: &SimamParams,
) -> Result<Var<T>> {
    if f_a1.shape() != f_a2.shape() {
        return Err(Error::shape(format!(
            "detail_aggregate: {:?} vs {:?}",
            f_a1.shape(),
            f_a2.shape()
        )));
    }
    simam(tape, &tape.add(f_a1, &simam(tape, f_a2, p)?)?, p)
}

/// Intermediate maps of one SAEM application, kept for inspection.
pub struct SaemOutputs<T> {
    pub f_diff: Var<T>,
    pub f_aggr: Var<T>,
    pub f_out: Var<T>,
}

pub fn saem_forward_detailed<T: Element>(
    tape: &Tape<'_, T>,
    f1: &Var<T>,
    f2: &Var<T>,
    w: &SaemWeights,
    p: &SimamParams,
) -> Result<SaemOutputs<T>> {
    let (c1, c2) = pre_conv(tape, f1, f2, w)?;
    let f_diff = diff_from_conv(tape, &c1, &c2, p)?;
    let f_a1 = add_from_conv(tape, &c1, &c2, w)?;
    let f_a2 = concat_from_conv(tape, &c1, &c2, w, p)?;
    let f_aggr = detail_aggregate(tape, &f_a1, &f_a2, p)?;
    let f_out = tape.add(&f_diff, &f_aggr)?;
    Ok(SaemOutputs { f_diff, f_aggr, f_out })
}

pub fn saem_forward<T: Element>(
    tape: &Tape<'_, T>,
    f1: &Var<T>,
    f2: &Var<T>,
    w: &SaemWeights,
    p: &SimamParams,
) -> Result<Var<T>> {
    Ok(saem_forward_detailed(tape, f1, f2, w, p)?.f_out)
}
