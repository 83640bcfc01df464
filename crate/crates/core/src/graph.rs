//! Reverse-mode differentiation over an append-only operation record.
//!
//! A [`Graph`] owns every intermediate value. Leaves are either borrowed
//! parameters (which receive gradients) or owned constants (which do not).
//! Since nodes are only ever appended, append order is a topological order
//! and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use arcp_core::{Graph, Tensor};
//!
//! let x = Tensor::scalar(3.0);
//! let mut g = Graph::new();
//! let xv = g.param(&x);
//! let y = g.mul(xv, xv).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(xv).unwrap().item(), 6.0);
//! ```

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv1dDims, Conv2dDims};
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-normalisation statistics observed in a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Elu(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    BroadcastTo(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    NormalizeLast(Var),
    NormLast(Var),
    Softmax(Var),
    CausalConv1d { x: Var, w: Var, b: Option<Var>, dims: Conv1dDims },
    Conv2d { x: Var, w: Var, b: Option<Var>, dims: Conv2dDims },
    Dense { x: Var, w: Var, b: Option<Var> },
    GlobalAvgPool(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    SoftmaxXent { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record. See the module docs.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` is not
    /// connected to the loss or does not require gradients.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::wrt`] but returns zeros shaped like `like` when the
    /// node is unreachable.
    pub fn wrt_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn unravel(mut flat: usize, shape: &[usize], out: &mut [usize]) {
    for (o, &d) in out.iter_mut().zip(shape).rev() {
        *o = flat % d;
        flat /= d;
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const NORM_FLOOR: f64 = 1e-12;

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned trainable leaf.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var) -> Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(out, mk(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        self.push(out, op, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, elu, Op::Elu(x))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis < {}", shape.len()), axis));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let n = shape[axis];
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let t = Tensor::new(oshape, out)?;
        Ok(self.push(t, Op::SumAxis { x, axis }, &[x]))
    }

    /// Repeats size-1 axes of `x` to reach `shape` (same rank).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        let ok = src_shape.len() == shape.len()
            && src_shape.iter().zip(shape).all(|(&s, &d)| s == d || s == 1);
        if !ok {
            return Err(Error::shape("broadcast_to", format!("{shape:?}"), format!("{src_shape:?}")));
        }
        let src_strides = strides(&src_shape);
        let src = self.value(x).data();
        let n = numel(shape);
        let mut idx = vec![0; shape.len()];
        let mut out = Vec::with_capacity(n);
        for flat in 0..n {
            unravel(flat, shape, &mut idx);
            let off: usize = idx
                .iter()
                .zip(&src_shape)
                .zip(&src_strides)
                .map(|((&i, &s), &st)| if s == 1 { 0 } else { i * st })
                .sum();
            out.push(src[off]);
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(t, Op::BroadcastTo(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("permutation of {} axes", shape.len()), format!("{perm:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let src = self.value(x).data();
        let n = src.len();
        let mut idx = vec![0; shape.len()];
        let mut out = Vec::with_capacity(n);
        for flat in 0..n {
            unravel(flat, &out_shape, &mut idx);
            let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
            out.push(src[off]);
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis < {}", first.len()), axis));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} off axis {axis}"), format!("{s:?}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("{shape:?}"), format!("axis {axis} [{start}, {})", start + len)));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let n = shape[axis];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let t = Tensor::new(oshape, out)?;
        Ok(self.push(t, Op::Slice { x, axis, start }, &[x]))
    }

    /// Scales every vector along the last axis to unit Euclidean length
    /// (lengths below 1e-12 are clamped).
    pub fn normalize_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().unwrap();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(k) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            out.extend(row.iter().map(|v| v / n));
        }
        let t = Tensor::new(shape, out).expect("same shape");
        self.push(t, Op::NormalizeLast(x), &[x])
    }

    /// Euclidean length along the last axis; the gradient at a zero vector
    /// is taken as zero.
    pub fn norm_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().unwrap();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(k)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let oshape = if shape.len() > 1 { shape[..shape.len() - 1].to_vec() } else { vec![1] };
        let t = Tensor::new(oshape, out).expect("consistent");
        self.push(t, Op::NormLast(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().unwrap();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(k) {
            softmax_into(row, &mut out);
        }
        let t = Tensor::new(shape, out).expect("same shape");
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Causal dilated 1-D convolution: `x` is `[B, C_in, T]`, `w` is
    /// `[C_out, C_in, K]`, optional `b` is `[C_out]`. Output is `[B, C_out, T]`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape("causal_conv1d", "[B,C,T] input and [O,C,K] kernel", format!("{xs:?} / {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape("causal_conv1d", format!("kernel C_in {}", xs[1]), ws[1]));
        }
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be >= 1".into()));
        }
        if let Some(b) = b {
            self.value(b).expect_shape("causal_conv1d bias", &[ws[0]])?;
        }
        let dims = Conv1dDims { batch: xs[0], c_in: xs[1], c_out: ws[0], len: xs[2], kernel: ws[2], dilation };
        let y = kernels::conv1d_causal_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            dims,
        );
        let t = Tensor::new(vec![dims.batch, dims.c_out, dims.len], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::CausalConv1d { x, w, b, dims }, &parents))
    }

    /// 2-D convolution: `x` is `[B, C, H, W]`, `w` is `[O, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] {
            return Err(Error::shape("conv2d", "[B,C,H,W] input and [O,C,KH,KW] kernel", format!("{xs:?} / {ws:?}")));
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::InvalidArgument(format!("conv2d geometry {xs:?} {ws:?} stride {stride} pad {pad}")));
        }
        if let Some(b) = b {
            self.value(b).expect_shape("conv2d bias", &[ws[0]])?;
        }
        let dims = Conv2dDims {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let y = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), dims);
        let t = Tensor::new(vec![dims.batch, dims.c_out, dims.out_h(), dims.out_w()], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, dims }, &parents))
    }

    /// Affine map `[B, in] -> [B, out]` with `w` stored `[out, in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::shape("dense", format!("[B,{}] input", ws.get(1).copied().unwrap_or(0)), format!("{xs:?}")));
        }
        if let Some(b) = b {
            self.value(b).expect_shape("dense bias", &[ws[0]])?;
        }
        let y = kernels::dense_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), xs[0], xs[1], ws[0]);
        let t = Tensor::new(vec![xs[0], ws[0]], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Dense { x, w, b }, &parents))
    }

    /// Spatial mean `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", "[B,C,H,W]", format!("{xs:?}")));
        }
        let plane = xs[2] * xs[3];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let t = Tensor::new(vec![xs[0], xs[1]], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x]))
    }

    /// Batch normalisation over every axis but axis 1. In train mode the
    /// batch statistics are used and returned; otherwise the supplied
    /// running statistics are applied as a fixed affine map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f64], &[f64]),
        train: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("batch_norm", "rank >= 2", format!("{xs:?}")));
        }
        let (batch, ch) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        self.value(gamma).expect_shape("batch_norm gamma", &[ch])?;
        self.value(beta).expect_shape("batch_norm beta", &[ch])?;
        if running.0.len() != ch || running.1.len() != ch {
            return Err(Error::shape("batch_norm running stats", ch, running.0.len()));
        }
        let xd = self.value(x).data();
        let (mean, var, stats) = if train {
            let (m, v) = kernels::channel_moments(xd, batch, ch, inner);
            (m.clone(), v.clone(), Some(BatchStats { mean: m, var: v }))
        } else {
            (running.0.to_vec(), running.1.to_vec(), None)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let r = (b * ch + c) * inner..(b * ch + c + 1) * inner;
                for i in r {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    y[i] = g[c] * h + bt[c];
                }
            }
        }
        let t = Tensor::new(xs, y)?;
        let v = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, &[x, gamma, beta]);
        Ok((v, stats))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", format!("[{}, K] logits", labels.len()), format!("{s:?}")));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(s[0] * k);
        for row in self.value(logits).data().chunks(k) {
            softmax_into(row, &mut probs);
        }
        let mut loss = 0.0;
        for (b, &l) in labels.iter().enumerate() {
            // log-sum-exp form keeps the value exact for saturated rows
            let row = &self.value(logits).data()[b * k..(b + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, probs, labels: labels.to_vec() },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "scalar loss", format!("{:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let gy = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn with_data(&self, like: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(like).to_vec(), data).expect("gradient shape")
    }

    fn backprop_node(&self, node: &Node<'a>, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = node.value.as_ref();
        let gd = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let g = gy.zip_map(self.value(*b), |g, bv| g * bv)?;
                    self.accumulate(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    let g = gy.zip_map(self.value(*a), |g, av| g * av)?;
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gy.zip_map(bv, |g, b| g / b)?);
                }
                if self.requires_grad(*b) {
                    let data = gd.iter().zip(y.data()).zip(bv.data()).map(|((g, y), b)| -g * y / b).collect();
                    self.accumulate(grads, *b, self.with_data(*b, data));
                }
            }
            Op::Neg(x) => self.accumulate(grads, *x, gy.map(|v| -v)),
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, gy.map(|v| v * c));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, gy.clone()),
            Op::Exp(x) => self.accumulate(grads, *x, gy.zip_map(y, |g, y| g * y)?),
            Op::Log(x) => self.accumulate(grads, *x, gy.zip_map(self.value(*x), |g, x| g / x)?),
            Op::Tanh(x) => self.accumulate(grads, *x, gy.zip_map(y, |g, y| g * (1.0 - y * y))?),
            Op::Sigmoid(x) => self.accumulate(grads, *x, gy.zip_map(y, |g, y| g * y * (1.0 - y))?),
            Op::Relu(x) => {
                self.accumulate(grads, *x, gy.zip_map(self.value(*x), |g, x| if x > 0.0 { g } else { 0.0 })?)
            }
            Op::Elu(x) => {
                let data = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .zip(y.data())
                    .map(|((g, &x), &y)| if x > 0.0 { *g } else { g * (y + 1.0) })
                    .collect();
                self.accumulate(grads, *x, self.with_data(*x, data));
            }
            Op::Softplus(x) => self.accumulate(grads, *x, gy.zip_map(self.value(*x), |g, x| g * sigmoid(x))?),
            Op::Square(x) => self.accumulate(grads, *x, gy.zip_map(self.value(*x), |g, x| 2.0 * g * x)?),
            Op::Sum(x) => {
                let g = gd[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, inner) = outer_inner(&shape, *axis);
                let n = shape[*axis];
                let mut out = vec![0.0; numel(&shape)];
                for o in 0..outer {
                    for k in 0..n {
                        out[(o * n + k) * inner..(o * n + k + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, self.with_data(*x, out));
            }
            Op::BroadcastTo(x) => {
                let src_shape = self.shape(*x).to_vec();
                let src_strides = strides(&src_shape);
                let out_shape = y.shape();
                let mut out = vec![0.0; numel(&src_shape)];
                let mut idx = vec![0; out_shape.len()];
                for (flat, g) in gd.iter().enumerate() {
                    unravel(flat, out_shape, &mut idx);
                    let off: usize = idx
                        .iter()
                        .zip(&src_shape)
                        .zip(&src_strides)
                        .map(|((&i, &s), &st)| if s == 1 { 0 } else { i * st })
                        .sum();
                    out[off] += g;
                }
                self.accumulate(grads, *x, self.with_data(*x, out));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, self.with_data(*x, gd.to_vec())),
            Op::Permute { x, perm } => {
                let in_shape = self.shape(*x).to_vec();
                let in_strides = strides(&in_shape);
                let out_shape = y.shape();
                let mut out = vec![0.0; gd.len()];
                let mut idx = vec![0; out_shape.len()];
                for (flat, g) in gd.iter().enumerate() {
                    unravel(flat, out_shape, &mut idx);
                    let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
                    out[off] = *g;
                }
                self.accumulate(grads, *x, self.with_data(*x, out));
            }
            Op::Concat { parts, axis } => {
                let (outer, inner) = outer_inner(y.shape(), *axis);
                let total = y.shape()[*axis];
                let mut start = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut out = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            out.extend_from_slice(&gd[(o * total + start) * inner..(o * total + start + n) * inner]);
                        }
                        self.accumulate(grads, p, self.with_data(p, out));
                    }
                    start += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, inner) = outer_inner(&shape, *axis);
                let n = shape[*axis];
                let len = y.shape()[*axis];
                let mut out = vec![0.0; numel(&shape)];
                for o in 0..outer {
                    out[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, self.with_data(*x, out));
            }
            Op::NormalizeLast(x) => {
                let k = *y.shape().last().unwrap();
                let xd = self.value(*x).data();
                let mut out = Vec::with_capacity(xd.len());
                for ((xr, yr), gr) in xd.chunks(k).zip(y.data().chunks(k)).zip(gd.chunks(k)) {
                    let raw = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if raw > NORM_FLOOR {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        out.extend(yr.iter().zip(gr).map(|(yv, g)| (g - yv * dot) / raw));
                    } else {
                        out.extend(gr.iter().map(|g| g / NORM_FLOOR));
                    }
                }
                self.accumulate(grads, *x, self.with_data(*x, out));
            }
            Op::NormLast(x) => {
                let xd = self.value(*x).data();
                let k = *self.shape(*x).last().unwrap();
                let mut out = Vec::with_capacity(xd.len());
                for ((xr, n), g) in xd.chunks(k).zip(y.data()).zip(gd) {
                    if *n > 0.0 {
                        out.extend(xr.iter().map(|v| g * v / n));
                    } else {
                        out.extend(std::iter::repeat(0.0).take(k));
                    }
                }
                self.accumulate(grads, *x, self.with_data(*x, out));
            }
            Op::Softmax(x) => {
                let k = *y.shape().last().unwrap();
                let mut out = Vec::with_capacity(gd.len());
                for (yr, gr) in y.data().chunks(k).zip(gd.chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(yv, g)| yv * (g - dot)));
                }
                self.accumulate(grads, *x, self.with_data(*x, out));
            }
            Op::CausalConv1d { x, w, b, dims } => {
                if self.requires_grad(*x) {
                    let dx = kernels::conv1d_causal_backward_input(gd, self.value(*w).data(), *dims);
                    self.accumulate(grads, *x, self.with_data(*x, dx));
                }
                if self.requires_grad(*w) {
                    let dw = kernels::conv1d_causal_backward_weight(gd, self.value(*x).data(), *dims);
                    self.accumulate(grads, *w, self.with_data(*w, dw));
                }
                if let Some(b) = b {
                    let db = kernels::channel_sums(gd, dims.batch, dims.c_out, dims.len);
                    self.accumulate(grads, *b, self.with_data(*b, db));
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                if self.requires_grad(*x) {
                    let dx = kernels::conv2d_backward_input(gd, self.value(*w).data(), *dims);
                    self.accumulate(grads, *x, self.with_data(*x, dx));
                }
                if self.requires_grad(*w) {
                    let dw = kernels::conv2d_backward_weight(gd, self.value(*x).data(), *dims);
                    self.accumulate(grads, *w, self.with_data(*w, dw));
                }
                if let Some(b) = b {
                    let db = kernels::channel_sums(gd, dims.batch, dims.c_out, dims.out_h() * dims.out_w());
                    self.accumulate(grads, *b, self.with_data(*b, db));
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x);
                let (batch, n_in, n_out) = (xs[0], xs[1], self.shape(*w)[0]);
                if self.requires_grad(*x) {
                    let dx = kernels::dense_backward_input(gd, self.value(*w).data(), batch, n_in, n_out);
                    self.accumulate(grads, *x, self.with_data(*x, dx));
                }
                if self.requires_grad(*w) {
                    let dw = kernels::dense_backward_weight(gd, self.value(*x).data(), batch, n_in, n_out);
                    self.accumulate(grads, *w, self.with_data(*w, dw));
                }
                if let Some(b) = b {
                    let db = kernels::channel_sums(gd, batch, n_out, 1);
                    self.accumulate(grads, *b, self.with_data(*b, db));
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let mut out = Vec::with_capacity(numel(xs));
                for g in gd {
                    out.extend(std::iter::repeat(g / plane as f64).take(plane));
                }
                self.accumulate(grads, *x, self.with_data(*x, out));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xs = self.shape(*x);
                let (batch, ch) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let m = (batch * inner) as f64;
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        for i in (b * ch + c) * inner..(b * ch + c + 1) * inner {
                            sum_g[c] += gd[i];
                            sum_gx[c] += gd[i] * xhat[i];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..batch {
                        for c in 0..ch {
                            let k = gam[c] * inv_std[c];
                            for i in (b * ch + c) * inner..(b * ch + c + 1) * inner {
                                dx[i] = if *train {
                                    k / m * (m * gd[i] - sum_g[c] - xhat[i] * sum_gx[c])
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, self.with_data(*x, dx));
                }
                self.accumulate(grads, *gamma, self.with_data(*gamma, sum_gx));
                self.accumulate(grads, *beta, self.with_data(*beta, sum_g));
            }
            Op::SoftmaxXent { logits, probs, labels } => {
                let k = self.shape(*logits)[1];
                let scale = gd[0] / labels.len() as f64;
                let mut out = probs.clone();
                for (b, &l) in labels.iter().enumerate() {
                    out[b * k + l] -= 1.0;
                }
                for v in &mut out {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, self.with_data(*logits, out));
            }
        }
        Ok(())
    }
}

fn softmax_into(row: &[f64], out: &mut Vec<f64>) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut z = 0.0;
    for v in row {
        let e = (v - m).exp();
        z += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= z;
    }
}

/// Softmax of a plain slice.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(row.len());
    softmax_into(row, &mut out);
    out
}
