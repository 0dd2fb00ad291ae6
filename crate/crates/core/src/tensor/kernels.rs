//! Raw forward and backward kernels on [`Tensor`] values.
//!
//! Nothing here records onto a tape; [`Tape`](super::Tape) pairs each forward
//! kernel with its adjoint. The multiply count of every forward kernel is
//! mirrored by a closed form in [`crate::profile::macs`].

use super::element::Element;
use super::value::{strides_of, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Layout walking

/// Strides of `shape` embedded into a broadcast output of rank `rank`;
/// broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides_of(shape);
    let lead = rank - shape.len();
    (0..rank)
        .map(|ax| {
            if ax < lead || shape[ax - lead] == 1 && out_shape[ax] != 1 {
                0
            } else {
                own[ax - lead]
            }
        })
        .collect()
}

/// Visits the output in runs along its last axis. `f(out_off, a_off, b_off)`
/// receives the starting offsets of each run.
fn for_each_run(out_shape: &[usize], a_strides: &[usize], b_strides: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let outer_rank = rank - 1;
    let mut counter = vec![0usize; outer_rank];
    let (mut a_off, mut b_off, mut out_off) = (0usize, 0usize, 0usize);
    loop {
        f(out_off, a_off, b_off);
        out_off += inner;
        let mut ax = outer_rank;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            counter[ax] += 1;
            a_off += a_strides[ax];
            b_off += b_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            a_off -= a_strides[ax] * out_shape[ax];
            b_off -= b_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "cannot broadcast {a:?} with {b:?} (axis {i}: {da} vs {db})"
                )))
            }
        };
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Elementwise

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline]
    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

pub fn binary<T: Element>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, |x, y| op.apply(x, y)));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let inner = *out_shape.last().unwrap_or(&1);
    let (ia, ib) = (sa.last().copied().unwrap_or(0), sb.last().copied().unwrap_or(0));
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for_each_run(&out_shape, &sa, &sb, |_, ao, bo| {
        for j in 0..inner {
            out.push(op.apply(ad[ao + j * ia], bd[bo + j * ib]));
        }
    });
    Tensor::new(&out_shape, out)
}

/// Sums `grad` (shaped like a broadcast output) down to `target` shape.
pub fn sum_to_shape<T: Element>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let out_shape = grad.shape().to_vec();
    let st = broadcast_strides(target, &out_shape);
    let dense = strides_of(&out_shape);
    let inner = *out_shape.last().unwrap_or(&1);
    let it = st.last().copied().unwrap_or(0);
    let mut acc = vec![T::zero(); target.iter().product()];
    let gd = grad.data();
    for_each_run(&out_shape, &dense, &st, |_, go, to| {
        for j in 0..inner {
            acc[to + j * it] += gd[go + j];
        }
    });
    Tensor::new(target, acc).expect("sum_to_shape: target shape")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Abs,
    Relu,
    Sigmoid,
    /// tanh approximation of GELU.
    Gelu,
    Exp,
    Recip,
    Scale(f64),
    AddScalar(f64),
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn gelu<T: Element>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let inner = k * (x + c * (x * x * x));
    half * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Element>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let th = (k * (x + c * x * x * x)).tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * k * (T::one() + three * c * x * x)
}

pub fn unary<T: Element>(op: UnaryOp, x: &Tensor<T>) -> Tensor<T> {
    match op {
        UnaryOp::Abs => x.map(|v| v.abs()),
        UnaryOp::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        UnaryOp::Sigmoid => x.map(sigmoid),
        UnaryOp::Gelu => x.map(gelu),
        UnaryOp::Exp => x.map(|v| v.exp()),
        UnaryOp::Recip => x.map(|v| T::one() / v),
        UnaryOp::Scale(c) => {
            let c = T::from_f64(c);
            x.map(|v| v * c)
        }
        UnaryOp::AddScalar(c) => {
            let c = T::from_f64(c);
            x.map(|v| v + c)
        }
    }
}

/// Adjoint of [`unary`]; `y` is the forward output.
pub fn unary_backward<T: Element>(op: UnaryOp, x: &Tensor<T>, y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let zero = T::zero();
    match op {
        // subgradient 0 at the kink for both abs and relu
        UnaryOp::Abs => x.zip_map(gy, |v, g| {
            if v > zero {
                g
            } else if v < zero {
                -g
            } else {
                zero
            }
        }),
        UnaryOp::Relu => x.zip_map(gy, |v, g| if v > zero { g } else { zero }),
        UnaryOp::Sigmoid => y.zip_map(gy, |s, g| g * s * (T::one() - s)),
        UnaryOp::Gelu => x.zip_map(gy, |v, g| g * gelu_grad(v)),
        UnaryOp::Exp => y.zip_map(gy, |e, g| g * e),
        UnaryOp::Recip => y.zip_map(gy, |r, g| -(g * r * r)),
        UnaryOp::Scale(c) => {
            let c = T::from_f64(c);
            gy.map(|g| g * c)
        }
        UnaryOp::AddScalar(_) => gy.clone(),
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

pub fn conv_out_len(axis: &str, input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    let span = input + 2 * pad;
    if span < k {
        return Err(Error::shape(format!(
            "conv2d {axis}: kernel {k} larger than padded input {span}"
        )));
    }
    if !(span - k).is_multiple_of(stride) {
        return Err(Error::shape(format!(
            "conv2d {axis}: ({input} + 2*{pad} - {k}) / {stride} + 1 is not an integer"
        )));
    }
    Ok((span - k) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` whose tap `o*stride + k - pad` lands in
/// `[0, input)`.
#[inline]
pub fn valid_taps(k: usize, pad: usize, stride: usize, input: usize, out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if input + pad > k {
        ((input - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub ch_per_group: usize,
    pub out_per_group: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: Conv2dSpec,
}

pub fn conv_geometry<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<ConvGeometry> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 {
        return Err(Error::shape(format!("conv2d input must be BCHW, got {xs:?}")));
    }
    if ws.len() != 4 {
        return Err(Error::shape(format!("conv2d weight must be OIKhKw, got {ws:?}")));
    }
    if spec.groups == 0 {
        return Err(Error::invalid("conv2d groups must be positive"));
    }
    let (c, o) = (xs[1], ws[0]);
    if c % spec.groups != 0 {
        return Err(Error::shape(format!(
            "conv2d channel axis: {c} input channels not divisible by {} groups",
            spec.groups
        )));
    }
    if o % spec.groups != 0 {
        return Err(Error::shape(format!(
            "conv2d output-channel axis: {o} not divisible by {} groups",
            spec.groups
        )));
    }
    if ws[1] != c / spec.groups {
        return Err(Error::shape(format!(
            "conv2d input-channel axis: weight expects {} channels per group, input has {}",
            ws[1],
            c / spec.groups
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape(format!(
                "conv2d bias axis: expected [{o}], got {:?}",
                b.shape()
            )));
        }
    }
    let oh = conv_out_len("height", xs[2], ws[2], spec.stride, spec.padding)?;
    let ow = conv_out_len("width", xs[3], ws[3], spec.stride, spec.padding)?;
    Ok(ConvGeometry {
        batch: xs[0],
        in_ch: c,
        out_ch: o,
        ch_per_group: c / spec.groups,
        out_per_group: o / spec.groups,
        h: xs[2],
        w: xs[3],
        kh: ws[2],
        kw: ws[3],
        oh,
        ow,
        spec,
    })
}

/// Visits every (input plane, weight, output plane) tap run. The closure
/// gets `(x_off, w_idx, out_off, rows, cols, kh, kw)` with input and output
/// plane offsets.
#[inline]
fn conv_taps(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize, (usize, usize), (usize, usize), usize, usize)) {
    let s = g.spec;
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let group = o / g.out_per_group;
            let out_off = (b * g.out_ch + o) * g.oh * g.ow;
            for i in 0..g.ch_per_group {
                let c = group * g.ch_per_group + i;
                let x_off = (b * g.in_ch + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let rows = valid_taps(ky, s.padding, s.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let cols = valid_taps(kx, s.padding, s.stride, g.w, g.ow);
                        let w_idx = ((o * g.ch_per_group + i) * g.kh + ky) * g.kw + kx;
                        f(x_off, w_idx, out_off, rows, cols, ky, kx);
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, w, bias, spec)?;
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    if let Some(b) = bias {
        let bd = b.data();
        for (idx, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(bd[idx % g.out_ch]);
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let (st, pad, iw, ow) = (spec.stride, spec.padding, g.w, g.ow);
    conv_taps(&g, |x_off, w_idx, out_off, rows, cols, ky, kx| {
        let wv = wd[w_idx];
        if cols.0 >= cols.1 {
            return;
        }
        for oy in rows.0..rows.1 {
            let iy = oy * st + ky - pad;
            let orow = out_off + oy * ow;
            let xrow = x_off + iy * iw;
            if st == 1 {
                let x0 = xrow + cols.0 + kx - pad;
                let n = cols.1 - cols.0;
                let dst = &mut out[orow + cols.0..orow + cols.1];
                for (d, &s) in dst.iter_mut().zip(&xd[x0..x0 + n]) {
                    *d += wv * s;
                }
            } else {
                for ox in cols.0..cols.1 {
                    out[orow + ox] += wv * xd[xrow + ox * st + kx - pad];
                }
            }
        }
    });
    Tensor::new(&[g.batch, g.out_ch, g.oh, g.ow], out)
}

pub struct Conv2dGrads<T> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    spec: Conv2dSpec,
    gy: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let g = conv_geometry(x, w, None, spec)?;
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    let (st, pad, iw, ow) = (spec.stride, spec.padding, g.w, g.ow);
    conv_taps(&g, |x_off, w_idx, out_off, rows, cols, ky, kx| {
        if cols.0 >= cols.1 {
            return;
        }
        let wv = wd[w_idx];
        let mut acc = T::zero();
        for oy in rows.0..rows.1 {
            let iy = oy * st + ky - pad;
            let orow = out_off + oy * ow;
            let xrow = x_off + iy * iw;
            if st == 1 {
                let x0 = xrow + cols.0 + kx - pad;
                let n = cols.1 - cols.0;
                let go = &gd[orow + cols.0..orow + cols.1];
                for ((gxv, &xv), &gv) in gx[x0..x0 + n].iter_mut().zip(&xd[x0..x0 + n]).zip(go) {
                    *gxv += wv * gv;
                    acc += gv * xv;
                }
            } else {
                for ox in cols.0..cols.1 {
                    let xi = xrow + ox * st + kx - pad;
                    let gv = gd[orow + ox];
                    gx[xi] += wv * gv;
                    acc += gv * xd[xi];
                }
            }
        }
        gw[w_idx] += acc;
    });
    let bias = has_bias.then(|| {
        let plane = g.oh * g.ow;
        let mut gb = vec![T::zero(); g.out_ch];
        for (idx, chunk) in gd.chunks(plane).enumerate() {
            gb[idx % g.out_ch] += chunk.iter().fold(T::zero(), |a, &v| a + v);
        }
        Tensor::new(&[g.out_ch], gb).expect("bias grad shape")
    });
    Ok(Conv2dGrads {
        x: Tensor::new(x.shape(), gx)?,
        w: Tensor::new(w.shape(), gw)?,
        bias,
    })
}

// ---------------------------------------------------------------------------
// Batched matrix product

fn matmul_dims<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 {
        return Err(Error::shape(format!(
            "matmul_batched needs rank-3 operands, got {sa:?} and {sb:?}"
        )));
    }
    if sa[0] != sb[0] {
        return Err(Error::shape(format!(
            "matmul_batched batch mismatch: {} vs {}",
            sa[0], sb[0]
        )));
    }
    if sa[2] != sb[1] {
        return Err(Error::shape(format!(
            "matmul_batched inner dimension mismatch: {sa:?} x {sb:?}"
        )));
    }
    Ok((sa[0], sa[1], sa[2], sb[2]))
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, m, k, n) = matmul_dims(a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); bs * m * n];
    for bi in 0..bs {
        for i in 0..m {
            let orow = &mut out[(bi * m + i) * n..(bi * m + i + 1) * n];
            for kk in 0..k {
                let av = ad[(bi * m + i) * k + kk];
                let brow = &bd[(bi * k + kk) * n..(bi * k + kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new(&[bs, m, n], out)
}

pub fn matmul_backward<T: Element>(a: &Tensor<T>, b: &Tensor<T>, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (bs, m, k, n) = matmul_dims(a, b)?;
    let (ad, bd, gd) = (a.data(), b.data(), gy.data());
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    for bi in 0..bs {
        for i in 0..m {
            let grow = &gd[(bi * m + i) * n..(bi * m + i + 1) * n];
            for kk in 0..k {
                let brow = &bd[(bi * k + kk) * n..(bi * k + kk + 1) * n];
                ga[(bi * m + i) * k + kk] = grow.iter().zip(brow).fold(T::zero(), |acc, (&g, &bv)| acc + g * bv);
                let av = ad[(bi * m + i) * k + kk];
                for (gbv, &g) in gb[(bi * k + kk) * n..(bi * k + kk + 1) * n].iter_mut().zip(grow) {
                    *gbv += av * g;
                }
            }
        }
    }
    Ok((Tensor::new(a.shape(), ga)?, Tensor::new(b.shape(), gb)?))
}

// ---------------------------------------------------------------------------
// Softmax

pub fn softmax_lastdim<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data().iter().any(|v| v.to_f64().is_nan()) {
        return Err(Error::NonFinite("softmax input contains NaN".into()));
    }
    let n = *x.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(n) {
        let m = row.iter().copied().fold(row[0], T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - m).exp();
            sum += e;
            out.push(e);
        }
        let inv = T::one() / sum;
        for e in &mut out[start..] {
            *e = *e * inv;
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn softmax_backward<T: Element>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().unwrap_or(&1);
    let mut gx = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(n).zip(gy.data().chunks(n)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
        gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
    }
    Tensor::new(y.shape(), gx).expect("softmax grad shape")
}

// ---------------------------------------------------------------------------
// Layout ops

pub fn check_permutation(rank: usize, axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(Error::invalid(format!(
            "permutation {axes:?} has length {}, tensor rank is {rank}",
            axes.len()
        )));
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::invalid(format!("{axes:?} is not a permutation of 0..{rank}")));
        }
        seen[a] = true;
    }
    Ok(())
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn permute<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    check_permutation(x.rank(), axes)?;
    if axes.iter().enumerate().all(|(i, &a)| i == a) {
        return Ok(x.clone());
    }
    let src = x.strides();
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let gather: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
    let inner = *out_shape.last().unwrap();
    let step = *gather.last().unwrap();
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for_each_run(&out_shape, &gather, &gather, |_, so, _| {
        for j in 0..inner {
            out.push(xd[so + j * step]);
        }
    });
    Tensor::new(&out_shape, out)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Returns the pooled tensor and, for max pooling, the flat source index of
/// the (first) argmax for every output element.
pub fn pool_over_axis<T: Element>(
    x: &Tensor<T>,
    axis: usize,
    kind: PoolKind,
) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    if axis >= x.rank() {
        return Err(Error::invalid(format!(
            "pool axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    let xd = x.data();
    match kind {
        PoolKind::Max => {
            let mut out = Vec::with_capacity(outer * inner);
            let mut arg = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut best = base;
                    for k in 1..n {
                        let idx = base + k * inner;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
            Ok((Tensor::new(&shape, out)?, Some(arg)))
        }
        PoolKind::Avg => {
            let inv = T::from_f64(1.0 / n as f64);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                for k in 0..n {
                    let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                for d in dst.iter_mut() {
                    *d = *d * inv;
                }
            }
            Ok((Tensor::new(&shape, out)?, None))
        }
    }
}

pub fn pool_backward<T: Element>(
    x_shape: &[usize],
    axis: usize,
    kind: PoolKind,
    argmax: Option<&[usize]>,
    gy: &Tensor<T>,
) -> Tensor<T> {
    let (outer, n, inner) = split_axis(x_shape, axis);
    let mut gx = vec![T::zero(); outer * n * inner];
    let gd = gy.data();
    match kind {
        PoolKind::Max => {
            for (&src, &g) in argmax.expect("max pool argmax").iter().zip(gd) {
                gx[src] += g;
            }
        }
        PoolKind::Avg => {
            let inv = T::from_f64(1.0 / n as f64);
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        gx[(o * n + k) * inner + i] = gd[o * inner + i] * inv;
                    }
                }
            }
        }
    }
    Tensor::new(x_shape, gx).expect("pool grad shape")
}

pub fn concat<T: Element>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::invalid("concat of an empty list"))?;
    if axis >= first.rank() {
        return Err(Error::invalid(format!(
            "concat axis {axis} out of range for rank {}",
            first.rank()
        )));
    }
    for t in xs {
        let ok = t.rank() == first.rank()
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(format!(
                "concat on axis {axis}: {:?} does not match {:?}",
                t.shape(),
                first.shape()
            )));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total: usize = xs.iter().map(|t| t.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in xs {
            let block = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(&shape, out)
}

pub fn narrow<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::invalid(format!(
            "narrow(axis {axis}, {start}..{}) out of range for {:?}",
            start + len,
            x.shape()
        )));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(&shape, out)
}

/// Embeds `g` at `start` along `axis` of a zero tensor shaped `full`.
pub fn narrow_backward<T: Element>(full: &[usize], axis: usize, start: usize, g: &Tensor<T>) -> Tensor<T> {
    let (outer, n, inner) = split_axis(full, axis);
    let len = g.shape()[axis];
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(full, out).expect("narrow grad shape")
}

// ---------------------------------------------------------------------------
// Bilinear 2x upsampling, align_corners = false

/// Source taps `(i0, i1, frac)` for each of the `2n` outputs along one axis.
/// Output `o` samples source coordinate `(o + 0.5) / 2 - 0.5`, clamped to the
/// valid range.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn rank4(x: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(format!("{what} expects BCHW, got {x:?}"))),
    }
}

pub fn upsample_bilinear2x<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = rank4(x.shape(), "upsample_bilinear2x")?;
    let tw = upsample_taps(w);
    let th = upsample_taps(h);
    let xd = x.data();
    let planes = b * c;
    // width pass: (planes, h, 2w)
    let mut mid = Vec::with_capacity(planes * h * 2 * w);
    for row in xd.chunks(w) {
        for &(i0, i1, f) in &tw {
            let f = T::from_f64(f);
            mid.push((T::one() - f) * row[i0] + f * row[i1]);
        }
    }
    // height pass: (planes, 2h, 2w)
    let w2 = 2 * w;
    let mut out = Vec::with_capacity(planes * 4 * h * w);
    for p in 0..planes {
        let base = p * h * w2;
        for &(i0, i1, f) in &th {
            let f = T::from_f64(f);
            let g = T::one() - f;
            let (r0, r1) = (base + i0 * w2, base + i1 * w2);
            for j in 0..w2 {
                out.push(g * mid[r0 + j] + f * mid[r1 + j]);
            }
        }
    }
    Tensor::new(&[b, c, 2 * h, 2 * w], out)
}

pub fn upsample_bilinear2x_backward<T: Element>(x_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = rank4(x_shape, "upsample_bilinear2x").expect("validated in forward");
    let tw = upsample_taps(w);
    let th = upsample_taps(h);
    let planes = b * c;
    let w2 = 2 * w;
    let gd = gy.data();
    let mut gmid = vec![T::zero(); planes * h * w2];
    for p in 0..planes {
        let base = p * h * w2;
        for (oy, &(i0, i1, f)) in th.iter().enumerate() {
            let f = T::from_f64(f);
            let g = T::one() - f;
            let src = (p * 2 * h + oy) * w2;
            for j in 0..w2 {
                let v = gd[src + j];
                gmid[base + i0 * w2 + j] += g * v;
                gmid[base + i1 * w2 + j] += f * v;
            }
        }
    }
    let mut gx = vec![T::zero(); planes * h * w];
    for (r, grow) in gmid.chunks(w2).enumerate() {
        for (ox, &(i0, i1, f)) in tw.iter().enumerate() {
            let f = T::from_f64(f);
            gx[r * w + i0] += (T::one() - f) * grow[ox];
            gx[r * w + i1] += f * grow[ox];
        }
    }
    Tensor::new(x_shape, gx).expect("upsample grad shape")
}

// ---------------------------------------------------------------------------
// Channel layer norm

pub struct LayerNormSaved<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm_channels<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormSaved<T>)> {
    let (b, c, h, w) = rank4(x.shape(), "layer_norm_channels")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "layer_norm_channels affine params must be [{c}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("layer_norm_channels eps must be positive"));
    }
    let hw = h * w;
    let inv_c = T::from_f64(1.0 / c as f64);
    let eps = T::from_f64(eps);
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let mut out = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstds = Vec::with_capacity(b * hw);
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut sum = T::zero();
            for ch in 0..c {
                sum += xd[base + ch * hw + p];
            }
            let mean = sum * inv_c;
            let mut sq = T::zero();
            for ch in 0..c {
                let d = xd[base + ch * hw + p] - mean;
                sq += d * d;
            }
            let var = sq * inv_c;
            let rstd = T::one() / (var + eps).sqrt();
            for ch in 0..c {
                let idx = base + ch * hw + p;
                let xh = (xd[idx] - mean) * rstd;
                xhat[idx] = xh;
                out[idx] = xh * gd[ch] + bd[ch];
            }
            rstds.push(rstd);
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        LayerNormSaved {
            xhat: Tensor::new(x.shape(), xhat)?,
            rstd: rstds,
        },
    ))
}

pub fn layer_norm_backward<T: Element>(
    saved: &LayerNormSaved<T>,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = gy.shape();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let inv_c = T::from_f64(1.0 / c as f64);
    let (xh, gd, gam) = (saved.xhat.data(), gy.data(), gamma.data());
    let mut gx = vec![T::zero(); gy.numel()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let rstd = saved.rstd[bi * hw + p];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for (ch, &g) in gam.iter().enumerate() {
                let idx = base + ch * hw + p;
                let gxh = gd[idx] * g;
                sum_g += gxh;
                sum_gx += gxh * xh[idx];
                ggamma[ch] += gd[idx] * xh[idx];
                gbeta[ch] += gd[idx];
            }
            for (ch, &g) in gam.iter().enumerate() {
                let idx = base + ch * hw + p;
                let gxh = gd[idx] * g;
                gx[idx] = rstd * (gxh - sum_g * inv_c - xh[idx] * sum_gx * inv_c);
            }
        }
    }
    (
        Tensor::new(shape, gx).expect("ln grad"),
        Tensor::new(&[c], ggamma).expect("ln gamma grad"),
        Tensor::new(&[c], gbeta).expect("ln beta grad"),
    )
}
