//! Cross-dimension interactive self-attention.
//!
//! Three branches over a `B x C x H x W` input are mixed with fixed weights:
//!
//! * A1, channel-channel: `softmax(Q K^T / a) V` with `Q, K, V` flattened to
//!   `B x C x HW`, so the attention map is `C x C` whatever the resolution.
//! * A2, channel-height: the input viewed as `B x W x C x H`, max- and
//!   average-pooled over W, squeezed to one gate map by a 1x1 conv, and the
//!   sigmoid of that gate rescales the view.
//! * A3, channel-width: the same with the roles of H and W swapped.
//!
//! `Q, K, V` come from depthwise-separable projections. The temperature `a`
//! is learned and stored as `ln a`. A 1x1 output projection follows the mix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Conv2dLayer;
use crate::tensor::{Conv2dSpec, Element, ParamBuilder, ParamId, PoolKind, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CisaConfig {
    pub channels: usize,
    pub lambda_ratio: [f64; 3],
    pub normalize_lambdas: bool,
    pub temperature_init: f64,
    pub qkv_kernel: usize,
    /// Reserved; only single-head attention is implemented.
    pub heads: usize,
}

impl Default for CisaConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            lambda_ratio: [2.0, 1.0, 1.0],
            normalize_lambdas: true,
            temperature_init: 1.0,
            qkv_kernel: 3,
            heads: 1,
        }
    }
}

impl CisaConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("cisa.channels must be at least 1".into()));
        }
        // zero weights are allowed so single branches can be isolated
        if self.lambda_ratio.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!(
                "cisa.lambda_ratio must be non-negative and finite, got {:?}",
                self.lambda_ratio
            )));
        }
        if self.lambda_ratio.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("cisa.lambda_ratio must not be all zero".into()));
        }
        if self.qkv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "cisa.qkv_kernel must be odd, got {}",
                self.qkv_kernel
            )));
        }
        if !(self.temperature_init > 0.0) {
            return Err(Error::Config("cisa.temperature_init must be positive".into()));
        }
        if self.heads != 1 {
            return Err(Error::Config(
                "cisa.heads: only single-head attention is supported".into(),
            ));
        }
        Ok(())
    }

    /// Branch weights actually applied: `lambda / sum(lambda)` when
    /// normalising, the raw ratio otherwise.
    pub fn lambda_weights(&self) -> [f64; 3] {
        if self.normalize_lambdas {
            let s: f64 = self.lambda_ratio.iter().sum();
            self.lambda_ratio.map(|l| l / s)
        } else {
            self.lambda_ratio
        }
    }
}

/// Depthwise `k x k` convolution followed by a pointwise `1 x 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DwsProjection {
    pub depthwise: Conv2dLayer,
    pub pointwise: Conv2dLayer,
}

impl DwsProjection {
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let spec = Conv2dSpec {
            stride: 1,
            padding: (kernel - 1) / 2,
            groups: channels,
        };
        Ok(Self {
            depthwise: Conv2dLayer::build(&mut s, "depthwise", channels, channels, kernel, spec)?,
            pointwise: Conv2dLayer::pointwise(&mut s, "pointwise", channels, channels)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CisaWeights {
    pub q_proj: DwsProjection,
    pub k_proj: DwsProjection,
    pub v_proj: DwsProjection,
    /// `ln a`, shape `[1]`.
    pub log_temperature: ParamId,
    pub gate_conv_h: Conv2dLayer,
    pub gate_conv_w: Conv2dLayer,
    pub out_proj: Conv2dLayer,
}

impl CisaWeights {
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, cfg: &CisaConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, k) = (cfg.channels, cfg.qkv_kernel);
        Ok(Self {
            q_proj: DwsProjection::build(b, "q_proj", c, k)?,
            k_proj: DwsProjection::build(b, "k_proj", c, k)?,
            v_proj: DwsProjection::build(b, "v_proj", c, k)?,
            log_temperature: b.constant(
                "log_temperature",
                Tensor::full(&[1], T::from_f64(cfg.temperature_init.ln())),
            )?,
            gate_conv_h: Conv2dLayer::pointwise(b, "gate_conv_h", 2, 1)?,
            gate_conv_w: Conv2dLayer::pointwise(b, "gate_conv_w", 2, 1)?,
            out_proj: Conv2dLayer::pointwise(b, "out_proj", c, c)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.q_proj.param_count()
            + self.k_proj.param_count()
            + self.v_proj.param_count()
            + 1
            + self.gate_conv_h.param_count()
            + self.gate_conv_w.param_count()
            + self.out_proj.param_count()
    }
}

fn expect_channels<T: Element>(x: &Var<T>, c: usize, what: &str) -> Result<()> {
    match x.shape() {
        [_, ch, _, _] if *ch == c => Ok(()),
        s => Err(Error::shape(format!(
            "{what}: expected B x {c} x H x W input, got {s:?}"
        ))),
    }
}

pub fn dws_project<T: Element>(tape: &Tape<'_, T>, x: &Var<T>, proj: &DwsProjection) -> Result<Var<T>> {
    expect_channels(x, proj.depthwise.in_ch, "dws_project")?;
    let d = proj.depthwise.forward(tape, x)?;
    proj.pointwise.forward(tape, &d)
}

/// Channel-channel branch. Returns the branch output and the `B x C x C`
/// attention map.
pub fn branch_a1_with_map<T: Element>(
    tape: &Tape<'_, T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    a: &Var<T>,
) -> Result<(Var<T>, Var<T>)> {
    let shape = q.shape().to_vec();
    if k.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
        return Err(Error::shape(format!(
            "branch_a1: q {:?}, k {:?}, v {:?} must match",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let [b, c, h, w] = shape[..] else {
        return Err(Error::shape(format!("branch_a1 expects BCHW, got {shape:?}")));
    };
    let flat = [b, c, h * w];
    let qf = tape.reshape(q, &flat)?;
    let kt = tape.permute(&tape.reshape(k, &flat)?, &[0, 2, 1])?;
    let vf = tape.reshape(v, &flat)?;
    let logits = tape.div(&tape.matmul(&qf, &kt)?, a)?;
    let map = tape.softmax_lastdim(&logits)?;
    let out = tape.matmul(&map, &vf)?;
    Ok((tape.reshape(&out, &shape)?, map))
}

pub fn branch_a1<T: Element>(tape: &Tape<'_, T>, q: &Var<T>, k: &Var<T>, v: &Var<T>, a: &Var<T>) -> Result<Var<T>> {
    Ok(branch_a1_with_map(tape, q, k, v, a)?.0)
}

/// Shared body of A2/A3: permute so the pooled axis is axis 1, gate, undo.
fn gated_interaction<T: Element>(
    tape: &Tape<'_, T>,
    x: &Var<T>,
    gate_conv: &Conv2dLayer,
    to_view: [usize; 4],
) -> Result<Var<T>> {
    if x.shape().len() != 4 {
        return Err(Error::shape(format!(
            "interaction branch expects BCHW, got {:?}",
            x.shape()
        )));
    }
    let view = tape.permute(x, &to_view)?;
    let mx = tape.pool(&view, 1, PoolKind::Max)?;
    let av = tape.pool(&view, 1, PoolKind::Avg)?;
    let stacked = tape.concat(&[&mx, &av], 1)?;
    let gate = tape.sigmoid(&gate_conv.forward(tape, &stacked)?);
    let gated = tape.mul(&view, &gate)?;
    let back = crate::tensor::kernels::inverse_permutation(&to_view);
    tape.permute(&gated, &back)
}

/// Channel-height branch: view `B x W x C x H`, pool over W.
pub fn branch_a2<T: Element>(tape: &Tape<'_, T>, x: &Var<T>, gate_conv_h: &Conv2dLayer) -> Result<Var<T>> {
    gated_interaction(tape, x, gate_conv_h, [0, 3, 1, 2])
}

/// Channel-width branch: view `B x H x C x W`, pool over H.
pub fn branch_a3<T: Element>(tape: &Tape<'_, T>, x: &Var<T>, gate_conv_w: &Conv2dLayer) -> Result<Var<T>> {
    gated_interaction(tape, x, gate_conv_w, [0, 2, 1, 3])
}

pub fn temperature<T: Element>(tape: &Tape<'_, T>, w: &CisaWeights) -> Var<T> {
    tape.exp(&tape.param(w.log_temperature))
}

pub fn cisa_forward<T: Element>(tape: &Tape<'_, T>, x: &Var<T>, w: &CisaWeights, cfg: &CisaConfig) -> Result<Var<T>> {
    expect_channels(x, cfg.channels, "cisa_forward")?;
    let q = dws_project(tape, x, &w.q_proj)?;
    let k = dws_project(tape, x, &w.k_proj)?;
    let v = dws_project(tape, x, &w.v_proj)?;
    let a = temperature(tape, w);
    let a1 = branch_a1(tape, &q, &k, &v, &a)?;
    let a2 = branch_a2(tape, x, &w.gate_conv_h)?;
    let a3 = branch_a3(tape, x, &w.gate_conv_w)?;
    let [l1, l2, l3] = cfg.lambda_weights();
    let mixed = tape.add(
        &tape.add(&tape.scale(&a1, l1), &tape.scale(&a2, l2))?,
        &tape.scale(&a3, l3),
    )?;
    w.out_proj.forward(tape, &mixed)
}
