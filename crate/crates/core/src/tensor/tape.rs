//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`]s during one forward
//! pass. Nodes are appended in evaluation order, so the tape is acyclic and
//! reverse append order is a valid reverse topological order. A tape is
//! single-threaded (`RefCell`); run independent samples on independent tapes
//! and sum their [`Gradients`].

use std::cell::RefCell;

use super::element::Element;
use super::kernels::{self, BinaryOp, Conv2dSpec, PoolKind, UnaryOp};
use super::param::{ParamId, ParamStore};
use super::value::Tensor;
use crate::error::{Error, Result};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    shape: Vec<usize>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

/// A value recorded on a tape.
#[derive(Clone)]
pub struct Var<T> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
}

impl<T: Element> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

impl<T: Element> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value)
    }
}

pub struct Tape<'p, T: Element> {
    params: Option<&'p ParamStore<T>>,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Element> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: Option<BackwardFn<T>>,
        param: Option<ParamId>,
        leaf_grad: bool,
    ) -> Var<T> {
        let requires_grad = leaf_grad || parents.iter().any(|p| p.requires_grad);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            shape: value.shape().to_vec(),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { backward } else { None },
            param,
        });
        Var {
            id,
            value,
            requires_grad,
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.push("constant", value, &[], None, None, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, value: Tensor<T>) -> Var<T> {
        self.push("input", value, &[], None, None, true)
    }

    /// Leaf bound to a stored parameter.
    pub fn param(&self, id: ParamId) -> Var<T> {
        let store = self
            .params
            .expect("Tape::param called on a tape built without a ParamStore");
        let value = store.get(id).value.clone();
        self.push("param", value, &[], None, Some(id), true)
    }

    /// Records an operation with a caller-supplied adjoint. `backward` maps
    /// the output gradient to one optional gradient per input, in order.
    pub fn custom(
        &self,
        op: &'static str,
        inputs: &[&Var<T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        self.push(op, value, inputs, Some(Box::new(backward)), None, false)
    }

    // -- elementwise -------------------------------------------------------

    fn binary(&self, op: BinaryOp, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = kernels::binary(op, &a.value, &b.value)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let back = move |g: &Tensor<T>| -> Vec<Option<Tensor<T>>> {
            let (ga, gb) = match op {
                BinaryOp::Add => (g.clone(), g.clone()),
                BinaryOp::Sub => (g.clone(), g.map(|v| -v)),
                BinaryOp::Mul => (
                    kernels::binary(BinaryOp::Mul, g, &bv).expect("mul grad"),
                    kernels::binary(BinaryOp::Mul, g, &av).expect("mul grad"),
                ),
                BinaryOp::Div => {
                    let ga = kernels::binary(BinaryOp::Div, g, &bv).expect("div grad");
                    let q = kernels::binary(BinaryOp::Div, &ga, &bv).expect("div grad");
                    let gb = kernels::binary(BinaryOp::Mul, &q, &av).expect("div grad");
                    (ga, gb.map(|v| -v))
                }
            };
            vec![
                Some(kernels::sum_to_shape(&ga, av.shape())),
                Some(kernels::sum_to_shape(&gb, bv.shape())),
            ]
        };
        Ok(self.push(name, out, &[a, b], Some(Box::new(back)), None, false))
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&self, op: UnaryOp, x: &Var<T>) -> Var<T> {
        let y = kernels::unary(op, &x.value);
        let (xv, yv) = (x.value.clone(), y.clone());
        let name = match op {
            UnaryOp::Abs => "abs",
            UnaryOp::Relu => "relu",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Gelu => "gelu",
            UnaryOp::Exp => "exp",
            UnaryOp::Recip => "recip",
            UnaryOp::Scale(_) => "scale",
            UnaryOp::AddScalar(_) => "add_scalar",
        };
        let back = move |g: &Tensor<T>| vec![Some(kernels::unary_backward(op, &xv, &yv, g))];
        self.push(name, y, &[x], Some(Box::new(back)), None, false)
    }

    pub fn abs(&self, x: &Var<T>) -> Var<T> {
        self.unary(UnaryOp::Abs, x)
    }

    pub fn relu(&self, x: &Var<T>) -> Var<T> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn gelu(&self, x: &Var<T>) -> Var<T> {
        self.unary(UnaryOp::Gelu, x)
    }

    pub fn exp(&self, x: &Var<T>) -> Var<T> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn recip(&self, x: &Var<T>) -> Var<T> {
        self.unary(UnaryOp::Recip, x)
    }

    pub fn scale(&self, x: &Var<T>, c: f64) -> Var<T> {
        self.unary(UnaryOp::Scale(c), x)
    }

    pub fn add_scalar(&self, x: &Var<T>, c: f64) -> Var<T> {
        self.unary(UnaryOp::AddScalar(c), x)
    }

    // -- contractions --------------------------------------------------------

    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>, spec: Conv2dSpec) -> Result<Var<T>> {
        let out = kernels::conv2d(&x.value, &w.value, bias.map(|b| &b.value), spec)?;
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let has_bias = bias.is_some();
        let back = move |g: &Tensor<T>| {
            let grads = kernels::conv2d_backward(&xv, &wv, has_bias, spec, g).expect("conv grad");
            let mut v = vec![Some(grads.x), Some(grads.w)];
            if has_bias {
                v.push(grads.bias);
            }
            v
        };
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push("conv2d", out, &parents, Some(Box::new(back)), None, false))
    }

    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = kernels::matmul(&a.value, &b.value)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        let back = move |g: &Tensor<T>| {
            let (ga, gb) = kernels::matmul_backward(&av, &bv, g).expect("matmul grad");
            vec![Some(ga), Some(gb)]
        };
        Ok(self.push("matmul", out, &[a, b], Some(Box::new(back)), None, false))
    }

    pub fn softmax_lastdim(&self, x: &Var<T>) -> Result<Var<T>> {
        let y = kernels::softmax_lastdim(&x.value)?;
        let yv = y.clone();
        let back = move |g: &Tensor<T>| vec![Some(kernels::softmax_backward(&yv, g))];
        Ok(self.push("softmax", y, &[x], Some(Box::new(back)), None, false))
    }

    // -- layout --------------------------------------------------------------

    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = x.value.reshape(shape)?;
        let src = x.value.shape().to_vec();
        let back = move |g: &Tensor<T>| vec![Some(g.reshape(&src).expect("reshape grad"))];
        Ok(self.push("reshape", out, &[x], Some(Box::new(back)), None, false))
    }

    pub fn permute(&self, x: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
        let out = kernels::permute(&x.value, axes)?;
        let inv = kernels::inverse_permutation(axes);
        let back = move |g: &Tensor<T>| vec![Some(kernels::permute(g, &inv).expect("permute grad"))];
        Ok(self.push("permute", out, &[x], Some(Box::new(back)), None, false))
    }

    pub fn pool(&self, x: &Var<T>, axis: usize, kind: PoolKind) -> Result<Var<T>> {
        let (out, arg) = kernels::pool_over_axis(&x.value, axis, kind)?;
        let shape = x.value.shape().to_vec();
        let back = move |g: &Tensor<T>| vec![Some(kernels::pool_backward(&shape, axis, kind, arg.as_deref(), g))];
        let name = match kind {
            PoolKind::Max => "max_pool",
            PoolKind::Avg => "avg_pool",
        };
        Ok(self.push(name, out, &[x], Some(Box::new(back)), None, false))
    }

    pub fn concat(&self, xs: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|v| &v.value).collect();
        let out = kernels::concat(&values, axis)?;
        let sizes: Vec<usize> = xs.iter().map(|v| v.shape()[axis]).collect();
        let back = move |g: &Tensor<T>| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&len| {
                    let part = kernels::narrow(g, axis, start, len).expect("concat grad");
                    start += len;
                    Some(part)
                })
                .collect()
        };
        Ok(self.push("concat", out, xs, Some(Box::new(back)), None, false))
    }

    pub fn narrow(&self, x: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let out = kernels::narrow(&x.value, axis, start, len)?;
        let full = x.value.shape().to_vec();
        let back = move |g: &Tensor<T>| vec![Some(kernels::narrow_backward(&full, axis, start, g))];
        Ok(self.push("narrow", out, &[x], Some(Box::new(back)), None, false))
    }

    pub fn upsample_bilinear2x(&self, x: &Var<T>) -> Result<Var<T>> {
        let out = kernels::upsample_bilinear2x(&x.value)?;
        let shape = x.value.shape().to_vec();
        let back = move |g: &Tensor<T>| vec![Some(kernels::upsample_bilinear2x_backward(&shape, g))];
        Ok(self.push("upsample_bilinear2x", out, &[x], Some(Box::new(back)), None, false))
    }

    pub fn layer_norm_channels(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let (out, saved) = kernels::layer_norm_channels(&x.value, &gamma.value, &beta.value, eps)?;
        let gv = gamma.value.clone();
        let back = move |g: &Tensor<T>| {
            let (gx, gg, gb) = kernels::layer_norm_backward(&saved, &gv, g);
            vec![Some(gx), Some(gg), Some(gb)]
        };
        Ok(self.push(
            "layer_norm_channels",
            out,
            &[x, gamma, beta],
            Some(Box::new(back)),
            None,
            false,
        ))
    }

    // -- reductions ------------------------------------------------------------

    /// Sum of all elements as a scalar.
    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let out = Tensor::scalar(x.value.sum());
        let shape = x.value.shape().to_vec();
        let back = move |g: &Tensor<T>| vec![Some(Tensor::full(&shape, g.item()))];
        self.push("sum", out, &[x], Some(Box::new(back)), None, false)
    }

    pub fn mean(&self, x: &Var<T>) -> Var<T> {
        let n = x.value.numel() as f64;
        let s = self.sum(x);
        self.scale(&s, 1.0 / n)
    }

    // -- backward ----------------------------------------------------------------

    /// Reverse sweep from a single-element `loss`. Each node is visited once.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(loss.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            let parent_grads = back(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.shape(), nodes[p].shape.as_slice(), "grad of {}", nodes[p].op);
                grads[p] = Some(match grads[p].take() {
                    None => pg,
                    Some(acc) => acc.zip_map(&pg, |a, b| a + b),
                });
            }
        }
        let mut params: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for (id, node) in nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads[id].as_ref()) {
                match params.iter_mut().find(|(q, _)| *q == pid) {
                    Some((_, acc)) => *acc = acc.zip_map(g, |a, b| a + b),
                    None => params.push((pid, g.clone())),
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

/// Result of one backward sweep.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient reaching `v`, if any flowed there.
    pub fn wrt(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.nodes.get(v.id).and_then(Option::as_ref)
    }

    /// Per-parameter gradients, summed over every use of the parameter.
    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}
