//! Static cost model: parameter counts and multiply-accumulate counts.
//!
//! A MAC here is one scalar multiplication in the forward pass, counted
//! exactly as the kernels perform them (divisions, additions, exponentials
//! and comparisons are free). Reports state the convention
//! `1 MAC = 2 FLOPs`. Every closed form below is checked against
//! [`crate::tensor::count_multiplies`] on small instances.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::attention::block::FFN_EXPANSION;
use crate::enhance::afm::CHANNEL_REDUCTION;
use crate::error::{Error, Result};
use crate::network::model::{DOWNSAMPLE, INPUT_CHANNELS, STEM_PATCH};
use crate::network::{LsatConfig, LsatModel};
use crate::tensor::kernels::{conv_out_len, valid_taps};
use crate::tensor::{Conv2dSpec, Element};

pub const FLOPS_PER_MAC: u64 = 2;
pub const CONVENTION: &str = "1 MAC = 2 FLOPs; MACs count forward-pass scalar multiplications";

/// Per-op closed forms.
pub mod ops {
    use super::*;

    fn taps_along(k: usize, spec: Conv2dSpec, input: usize) -> Result<u64> {
        let out = conv_out_len("profile", input, k, spec.stride, spec.padding)?;
        Ok((0..k)
            .map(|t| {
                let (lo, hi) = valid_taps(t, spec.padding, spec.stride, input, out);
                (hi - lo) as u64
            })
            .sum())
    }

    /// Multiplies that land inside the input; padded taps are skipped.
    pub fn conv2d(
        b: usize,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        spec: Conv2dSpec,
        h: usize,
        w: usize,
    ) -> Result<u64> {
        let per_group = (in_ch / spec.groups) as u64;
        Ok(b as u64 * out_ch as u64 * per_group * taps_along(k, spec, h)? * taps_along(k, spec, w)?)
    }

    pub fn pointwise(b: usize, in_ch: usize, out_ch: usize, h: usize, w: usize) -> u64 {
        (b * in_ch * out_ch * h * w) as u64
    }

    pub fn matmul(b: usize, m: usize, k: usize, n: usize) -> u64 {
        (b * m * k * n) as u64
    }

    /// One multiply by the reciprocal row sum per element.
    pub fn softmax(numel: usize) -> u64 {
        numel as u64
    }

    pub fn elementwise_mul(numel: usize) -> u64 {
        numel as u64
    }

    pub fn scale(numel: usize) -> u64 {
        numel as u64
    }

    /// tanh approximation: six multiplies per element.
    pub fn gelu(numel: usize) -> u64 {
        6 * numel as u64
    }

    /// Average pooling multiplies each output by `1/n` once; max pooling is free.
    pub fn avg_pool(out_numel: usize) -> u64 {
        out_numel as u64
    }

    /// Mean, variance and the per-position normalise-then-affine.
    pub fn layer_norm(b: usize, c: usize, h: usize, w: usize) -> u64 {
        ((3 * c + 2) * b * h * w) as u64
    }

    /// Separable two-tap interpolation, width pass then height pass.
    pub fn upsample_bilinear2x(b: usize, c: usize, h: usize, w: usize) -> u64 {
        (12 * b * c * h * w) as u64
    }

    pub fn simam(b: usize, c: usize, h: usize, w: usize) -> u64 {
        let (bc, bch, n) = (b * c, b * c * h, b * c * h * w);
        (3 * n + 2 * bch + 4 * bc) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Cisa,
    Vanilla,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Cisa => "cisa",
            AttentionKind::Vanilla => "vanilla",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cisa" => Ok(AttentionKind::Cisa),
            "vanilla" => Ok(AttentionKind::Vanilla),
            other => Err(Error::invalid(format!("unknown attention kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AttentionMacs {
    pub total: u64,
    /// Token/channel interaction terms: the part whose growth in `HW`
    /// distinguishes the two attention kinds.
    pub core: u64,
    pub projections: u64,
    pub params: u64,
}

/// Closed-form cost of one attention module on a `1 x C x H x W` input
/// (3x3 depthwise-separable projections for CISA, 1x1 for vanilla).
pub fn count_attention_macs(kind: AttentionKind, c: usize, h: usize, w: usize) -> Result<AttentionMacs> {
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "attention dims must be positive, got C={c} H={h} W={w}"
        )));
    }
    let n = h * w;
    match kind {
        AttentionKind::Cisa => cisa_macs(c, h, w, 3),
        AttentionKind::Vanilla => {
            let projections = 3 * ops::pointwise(1, c, c, h, w);
            let core = ops::matmul(1, n, c, n) + ops::scale(n * n) + ops::softmax(n * n) + ops::matmul(1, n, n, c);
            Ok(AttentionMacs {
                total: projections + core,
                core,
                projections,
                params: 3 * (c * c + c) as u64,
            })
        }
    }
}

fn cisa_macs(c: usize, h: usize, w: usize, k: usize) -> Result<AttentionMacs> {
    let n = c * h * w;
    let dw = Conv2dSpec {
        stride: 1,
        padding: (k - 1) / 2,
        groups: c,
    };
    let dws = ops::conv2d(1, c, c, k, dw, h, w)? + ops::pointwise(1, c, c, h, w);
    let projections = 3 * dws + ops::pointwise(1, c, c, h, w);
    let a1 = ops::matmul(1, c, h * w, c) + ops::softmax(c * c) + ops::matmul(1, c, c, h * w);
    // A2 pools over W (view B x W x C x H), A3 over H (view B x H x C x W).
    let gate = |pooled: usize| ops::avg_pool(pooled) + ops::pointwise(1, 2, 1, pooled, 1) + ops::elementwise_mul(n);
    let a2 = gate(c * h);
    let a3 = gate(c * w);
    let mix = 3 * ops::scale(n);
    let core = a1 + a2 + a3 + mix;
    let params = 3 * (c * k * k + c + c * c + c) + 1 + 2 * 3 + c * c + c;
    Ok(AttentionMacs {
        total: projections + core,
        core,
        projections,
        params: params as u64,
    })
}

/// One pre-norm CISA block: two norms, the attention and the feed-forward.
pub fn block_macs(b: usize, c: usize, h: usize, w: usize, qkv_kernel: usize) -> Result<(u64, u64)> {
    let att = cisa_macs(c, h, w, qkv_kernel)?;
    let e = FFN_EXPANSION * c;
    let ffn = ops::pointwise(b, c, e, h, w) + ops::gelu(b * e * h * w) + ops::pointwise(b, e, c, h, w);
    let total = 2 * ops::layer_norm(b, c, h, w) + b as u64 * att.total + ffn;
    Ok((total, b as u64 * att.core))
}

pub fn saem_macs(b: usize, c: usize, h: usize, w: usize) -> Result<u64> {
    let same3 = Conv2dSpec {
        stride: 1,
        padding: 1,
        groups: 1,
    };
    Ok(2 * ops::conv2d(b, c, c, 3, same3, h, w)?
        + ops::pointwise(b, c, c, h, w)
        + ops::pointwise(b, 2 * c, c, h, w)
        + 6 * ops::simam(b, c, h, w))
}

pub fn afm_macs(b: usize, c: usize, h: usize, w: usize) -> u64 {
    let hidden = c / CHANNEL_REDUCTION;
    ops::pointwise(b, 2 * c, c, h, w)
        + ops::avg_pool(b * c * h)
        + ops::avg_pool(b * c)
        + ops::pointwise(b, c, hidden, 1, 1)
        + ops::pointwise(b, hidden, c, 1, 1)
        + ops::avg_pool(b * h * w)
        + ops::pointwise(b, 2, 1, h, w)
        + 2 * ops::elementwise_mul(b * c * h * w)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ModuleCost {
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
}

impl ModuleCost {
    fn new(macs: u64, params: u64) -> Self {
        Self {
            macs,
            flops: FLOPS_PER_MAC * macs,
            params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub convention: &'static str,
    pub tile: usize,
    pub batch: usize,
    /// `stem`, `encoder`, `saem`, `afm`, `decoder`, `head`. Encoder and stem
    /// MACs cover both temporal inputs.
    pub per_module: BTreeMap<String, ModuleCost>,
    pub totals: ModuleCost,
    /// Attention-core MACs summed over every CISA block.
    pub attention_core_macs: u64,
}

pub const MODULES: [&str; 6] = ["stem", "encoder", "saem", "afm", "decoder", "head"];

/// Analytic per-module parameter counts, independent of any parameter store.
pub fn param_tally(cfg: &LsatConfig) -> BTreeMap<String, u64> {
    let ch = &cfg.stage_channels;
    let n = ch.len();
    let k = cfg.qkv_kernel;
    let conv = |i: usize, o: usize, kk: usize| (i * o * kk * kk + o) as u64;
    let block = |c: usize| {
        let cisa = 3 * (c * k * k + c + c * c + c) + 1 + 2 * 3 + c * c + c;
        let e = FFN_EXPANSION * c;
        (2 * 2 * c + cisa) as u64 + conv(c, e, 1) + conv(e, c, 1)
    };
    let mut t = BTreeMap::new();
    t.insert("stem".into(), conv(INPUT_CHANNELS, ch[0], STEM_PATCH));
    let mut enc: u64 = (0..n).map(|i| cfg.stage_depths[i] as u64 * block(ch[i])).sum();
    enc += (1..n).map(|i| conv(ch[i - 1], ch[i], DOWNSAMPLE)).sum::<u64>();
    t.insert("encoder".into(), enc);
    t.insert(
        "saem".into(),
        (0..n - 1)
            .map(|i| conv(ch[i], ch[i], 3) + conv(ch[i], ch[i], 1) + conv(2 * ch[i], ch[i], 1))
            .sum(),
    );
    let c = ch[n - 1];
    let hid = c / CHANNEL_REDUCTION;
    t.insert(
        "afm".into(),
        conv(2 * c, c, 1) + conv(c, hid, 1) + conv(hid, c, 1) + conv(2, 1, 1),
    );
    t.insert(
        "decoder".into(),
        (0..n - 1)
            .map(|i| conv(ch[i + 1] + ch[i], ch[i], 1) + block(ch[i]))
            .sum(),
    );
    t.insert(
        "head".into(),
        conv(ch[0], cfg.head_mid_channels, 3) + conv(cfg.head_mid_channels, 1, 1),
    );
    t
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub total: u64,
    pub per_module: BTreeMap<String, u64>,
}

/// Element counts of the model's parameter store, grouped by name prefix.
pub fn count_params<T: Element>(m: &LsatModel<T>) -> ParamReport {
    let per_module: BTreeMap<String, u64> = MODULES
        .iter()
        .map(|&name| (name.to_string(), m.params.count_elements(name) as u64))
        .collect();
    ParamReport {
        total: m.params.total_elements() as u64,
        per_module,
    }
}

/// Static MAC walk of the whole network for a `batch x 3 x tile x tile` pair.
pub fn count_flops(cfg: &LsatConfig, tile: usize, batch: usize) -> Result<FlopReport> {
    let cfg = LsatConfig { tile, ..cfg.clone() };
    cfg.validate()?;
    let ch = &cfg.stage_channels;
    let n = ch.len();
    let b = batch;
    let side = |i: usize| cfg.level_side(i);
    let mut macs: BTreeMap<&str, u64> = MODULES.iter().map(|&m| (m, 0)).collect();
    let mut core = 0u64;

    let stem_spec = Conv2dSpec {
        stride: STEM_PATCH,
        ..Conv2dSpec::default()
    };
    let down_spec = Conv2dSpec {
        stride: DOWNSAMPLE,
        ..Conv2dSpec::default()
    };
    // both temporal inputs share the encoder
    *macs.get_mut("stem").unwrap() = 2 * ops::conv2d(b, INPUT_CHANNELS, ch[0], STEM_PATCH, stem_spec, tile, tile)?;
    let mut enc = 0u64;
    for i in 0..n {
        if i > 0 {
            let s = side(i - 1);
            enc += ops::conv2d(b, ch[i - 1], ch[i], DOWNSAMPLE, down_spec, s, s)?;
        }
        for _ in 0..cfg.stage_depths[i] {
            let (t, c) = block_macs(b, ch[i], side(i), side(i), cfg.qkv_kernel)?;
            enc += t;
            core += 2 * c;
        }
    }
    *macs.get_mut("encoder").unwrap() = 2 * enc;
    *macs.get_mut("saem").unwrap() = (0..n - 1)
        .map(|i| saem_macs(b, ch[i], side(i), side(i)))
        .sum::<Result<u64>>()?;
    *macs.get_mut("afm").unwrap() = afm_macs(b, ch[n - 1], side(n - 1), side(n - 1));
    let mut dec = 0u64;
    for i in (0..n - 1).rev() {
        let (s_deep, s) = (side(i + 1), side(i));
        dec += ops::upsample_bilinear2x(b, ch[i + 1], s_deep, s_deep);
        dec += ops::pointwise(b, ch[i + 1] + ch[i], ch[i], s, s);
        let (t, c) = block_macs(b, ch[i], s, s, cfg.qkv_kernel)?;
        dec += t;
        core += c;
    }
    *macs.get_mut("decoder").unwrap() = dec;
    let s0 = side(0);
    let same3 = Conv2dSpec {
        stride: 1,
        padding: 1,
        groups: 1,
    };
    *macs.get_mut("head").unwrap() = ops::upsample_bilinear2x(b, ch[0], s0, s0)
        + ops::upsample_bilinear2x(b, ch[0], 2 * s0, 2 * s0)
        + ops::conv2d(b, ch[0], cfg.head_mid_channels, 3, same3, tile, tile)?
        + ops::pointwise(b, cfg.head_mid_channels, 1, tile, tile);

    let params = param_tally(&cfg);
    let per_module: BTreeMap<String, ModuleCost> = MODULES
        .iter()
        .map(|&m| (m.to_string(), ModuleCost::new(macs[m], params[m])))
        .collect();
    let totals = ModuleCost::new(macs.values().sum(), params.values().sum());
    Ok(FlopReport {
        convention: CONVENTION,
        tile,
        batch,
        per_module,
        totals,
        attention_core_macs: core,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("slope fit needs at least two paired points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("slope fit needs strictly positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("slope fit needs at least two distinct x values"));
    }
    Ok(sxy / sxx)
}

pub const CSV_HEADER: &str = "kind,C,H,W,macs_total,macs_attention_core,params";

pub fn csv_row(kind: AttentionKind, c: usize, h: usize, w: usize, m: &AttentionMacs) -> String {
    format!("{kind},{c},{h},{w},{},{},{}", m.total, m.core, m.params)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingFit {
    pub kind: AttentionKind,
    pub channels: usize,
    pub sizes: Vec<usize>,
    pub slope_core: f64,
    pub slope_total: f64,
}

/// Square `side x side` instances for each side; slopes are fitted against
/// `N = side^2`. Returns the CSV text and one fit per kind.
pub fn scaling_report(channels: usize, sides: &[usize]) -> Result<(String, Vec<ScalingFit>)> {
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut fits = Vec::new();
    for kind in [AttentionKind::Cisa, AttentionKind::Vanilla] {
        let mut ns = Vec::new();
        let (mut core, mut total) = (Vec::new(), Vec::new());
        for &s in sides {
            let m = count_attention_macs(kind, channels, s, s)?;
            csv.push_str(&csv_row(kind, channels, s, s, &m));
            csv.push('\n');
            ns.push((s * s) as f64);
            core.push(m.core as f64);
            total.push(m.total as f64);
        }
        fits.push(ScalingFit {
            kind,
            channels,
            sizes: sides.to_vec(),
            slope_core: loglog_slope(&ns, &core)?,
            slope_total: loglog_slope(&ns, &total)?,
        });
    }
    Ok((csv, fits))
}
