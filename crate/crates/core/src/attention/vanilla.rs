//! Spatial self-attention over `HW` tokens; the quadratic-cost baseline the
//! profiler compares CISA against.

use crate::error::{Error, Result};
use crate::layers::Conv2dLayer;
use crate::tensor::{Element, ParamBuilder, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VanillaWeights {
    pub q_proj: Conv2dLayer,
    pub k_proj: Conv2dLayer,
    pub v_proj: Conv2dLayer,
    pub channels: usize,
}

impl VanillaWeights {
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self {
            q_proj: Conv2dLayer::pointwise(b, "q_proj", channels, channels)?,
            k_proj: Conv2dLayer::pointwise(b, "k_proj", channels, channels)?,
            v_proj: Conv2dLayer::pointwise(b, "v_proj", channels, channels)?,
            channels,
        })
    }

    pub fn param_count(&self) -> usize {
        self.q_proj.param_count() + self.k_proj.param_count() + self.v_proj.param_count()
    }
}

/// Returns the output and the `B x HW x HW` attention map.
pub fn vanilla_attention_with_map<T: Element>(
    tape: &Tape<'_, T>,
    x: &Var<T>,
    w: &VanillaWeights,
) -> Result<(Var<T>, Var<T>)> {
    let shape = x.shape().to_vec();
    let [b, c, h, wd] = shape[..] else {
        return Err(Error::shape(format!("vanilla_attention expects BCHW, got {shape:?}")));
    };
    if c != w.channels {
        return Err(Error::shape(format!(
            "vanilla_attention: expected {} channels, got {c}",
            w.channels
        )));
    }
    let flat = [b, c, h * wd];
    let q = tape.reshape(&w.q_proj.forward(tape, x)?, &flat)?;
    let k = tape.reshape(&w.k_proj.forward(tape, x)?, &flat)?;
    let v = tape.reshape(&w.v_proj.forward(tape, x)?, &flat)?;
    let qt = tape.permute(&q, &[0, 2, 1])?;
    let logits = tape.scale(&tape.matmul(&qt, &k)?, 1.0 / (c as f64).sqrt());
    let map = tape.softmax_lastdim(&logits)?;
    let vt = tape.permute(&v, &[0, 2, 1])?;
    let out_t = tape.matmul(&map, &vt)?;
    let out = tape.permute(&out_t, &[0, 2, 1])?;
    Ok((tape.reshape(&out, &shape)?, map))
}

pub fn vanilla_attention<T: Element>(tape: &Tape<'_, T>, x: &Var<T>, w: &VanillaWeights) -> Result<Var<T>> {
    Ok(vanilla_attention_with_map(tape, x, w)?.0)
}
