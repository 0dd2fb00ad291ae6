//! Parameter bundles shared by every module: convolutions and channel norms.

use crate::error::Result;
use crate::tensor::{Conv2dSpec, Element, ParamBuilder, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub spec: Conv2dSpec,
}

impl Conv2dLayer {
    /// Registers `<name>.weight` (fan-in normal) and `<name>.bias` (zeros).
    pub fn build<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let per_group = in_ch / spec.groups;
        let weight = s.fan_in_normal(
            "weight",
            &[out_ch, per_group, kernel, kernel],
            per_group * kernel * kernel,
        )?;
        let bias = Some(s.constant("bias", Tensor::zeros(&[out_ch]))?);
        Ok(Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            spec,
        })
    }

    pub fn pointwise<T: Element>(b: &mut ParamBuilder<'_, T>, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Self::build(b, name, in_ch, out_ch, 1, Conv2dSpec::default())
    }

    /// `k`x`k`, stride 1, "same" padding.
    pub fn same<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
    ) -> Result<Self> {
        let spec = Conv2dSpec {
            stride: 1,
            padding: (k - 1) / 2,
            groups: 1,
        };
        Self::build(b, name, in_ch, out_ch, k, spec)
    }

    pub fn forward<T: Element>(&self, tape: &Tape<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|id| tape.param(id));
        tape.conv2d(x, &w, b.as_ref(), self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * (self.in_ch / self.spec.groups) * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_ch } else { 0 }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    /// Overwrites weight and bias; test helper for hand-picked kernels.
    pub fn set<T: Element>(&self, store: &mut ParamStore<T>, weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<()> {
        store.set_value(self.weight, weight)?;
        if let (Some(id), Some(b)) = (self.bias, bias) {
            store.set_value(id, b)?;
        }
        Ok(())
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl ChannelNorm {
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            gamma: s.constant("gamma", Tensor::ones(&[channels]))?,
            beta: s.constant("beta", Tensor::zeros(&[channels]))?,
            channels,
        })
    }

    pub fn forward<T: Element>(&self, tape: &Tape<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm_channels(x, &g, &b, LAYER_NORM_EPS)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}
