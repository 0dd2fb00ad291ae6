//! Pre-norm transformer block around CISA:
//! `y = x + cisa(norm1(x))`, `z = y + ffn(norm2(y))` with a 2x expanding
//! 1x1-conv feed-forward and GELU.

use super::cisa::{cisa_forward, CisaConfig, CisaWeights};
use crate::error::Result;
use crate::layers::{ChannelNorm, Conv2dLayer};
use crate::tensor::{Element, ParamBuilder, Tape, Var};

pub const FFN_EXPANSION: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm1: ChannelNorm,
    pub cisa: CisaWeights,
    pub norm2: ChannelNorm,
    pub ffn_expand: Conv2dLayer,
    pub ffn_reduce: Conv2dLayer,
    pub cfg: CisaConfig,
}

impl BlockWeights {
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, cfg: &CisaConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            norm1: ChannelNorm::build(b, "norm1", c)?,
            cisa: CisaWeights::build(&mut b.scope("cisa"), cfg)?,
            norm2: ChannelNorm::build(b, "norm2", c)?,
            ffn_expand: Conv2dLayer::pointwise(b, "ffn.expand", c, FFN_EXPANSION * c)?,
            ffn_reduce: Conv2dLayer::pointwise(b, "ffn.reduce", FFN_EXPANSION * c, c)?,
            cfg: cfg.clone(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.norm1.param_count()
            + self.cisa.param_count()
            + self.norm2.param_count()
            + self.ffn_expand.param_count()
            + self.ffn_reduce.param_count()
    }
}

pub fn block_forward<T: Element>(tape: &Tape<'_, T>, x: &Var<T>, w: &BlockWeights) -> Result<Var<T>> {
    let attn = cisa_forward(tape, &w.norm1.forward(tape, x)?, &w.cisa, &w.cfg)?;
    let y = tape.add(x, &attn)?;
    let hidden = tape.gelu(&w.ffn_expand.forward(tape, &w.norm2.forward(tape, &y)?)?);
    let ffn = w.ffn_reduce.forward(tape, &hidden)?;
    tape.add(&y, &ffn)
}
