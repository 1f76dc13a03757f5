//! Shaped f32 arrays with reverse-mode differentiation.
//!
//! Tensors are immutable values. Every operation is a pure function that
//! returns a fresh tensor; when any input participates in gradient tracking
//! the producing op is recorded so that [`Tensor::backward`] can replay the
//! graph in reverse. Reductions and statistics accumulate in f64 before the
//! final f32 store to keep finite-difference checks meaningful at fp32.

mod conv;
mod gradcheck;
mod norm;
mod shape_ops;

pub use gradcheck::grad_check;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Immutable shaped array of f32 values.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// How a non-leaf tensor was produced; holds the parents and whatever
/// forward-pass state the reverse pass needs.
enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f32),
    AddScalar(Tensor),
    Abs(Tensor),
    Exp(Tensor),
    Ln(Tensor),
    Sqrt(Tensor),
    Recip(Tensor),
    Silu(Tensor),
    LeakyRelu(Tensor, f32),
    Sum(Tensor),
    Mean(Tensor),
    Dot(Tensor, Tensor),
    MulScalarT(Tensor, Tensor),
    Linear {
        x: Tensor,
        w: Tensor,
        b: Option<Tensor>,
    },
    Conv2d {
        x: Tensor,
        w: Tensor,
        b: Option<Tensor>,
        stride: usize,
    },
    DepthwiseConv3x3 {
        x: Tensor,
        k: Tensor,
    },
    GroupNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        groups: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    ChannelAffine {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        shift: Vec<f32>,
        scale: Vec<f32>,
    },
    ConcatDim0(Vec<Tensor>),
    Reshape(Tensor),
    PixelFold(Tensor),
    PixelShuffle(Tensor),
    NearestResize(Tensor),
    Gap(Tensor),
    AddChannelBias {
        x: Tensor,
        bias: Tensor,
    },
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {count} elements, got {}",
                shape,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero-sized dimension in {shape:?}")));
        }
        Ok(Self {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data: Arc::new(data),
                requires_grad,
                op: None,
            }),
        })
    }

    fn from_op(shape: Vec<usize>, data: Vec<f32>, op: Op) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data: Arc::new(data),
                requires_grad: true,
                op: Some(op),
            }),
        }
    }

    /// Plain value; does not participate in differentiation.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Leaf that accumulates gradients (a learnable parameter or a
    /// grad-checked input).
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![0.0; n], false).expect("consistent")
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; n], false).expect("consistent")
    }

    pub fn scalar(value: f32) -> Self {
        Self::leaf(vec![1], vec![value], false).expect("consistent")
    }

    /// Standard normal samples drawn from `rng` in row-major order.
    pub fn randn(shape: &[usize], rng: &mut SeededRng) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), rng.normal_vec(n), false).expect("consistent")
    }

    /// New leaf sharing this tensor's storage, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                requires_grad: false,
                op: None,
            }),
        }
    }

    /// New gradient-accumulating leaf sharing this tensor's storage.
    pub fn with_grad(&self) -> Self {
        Self {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                requires_grad: true,
                op: None,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    pub(crate) fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape() {
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(Error::dim(format!("expected rank-3 tensor, got {s:?}"))),
        }
    }

    pub(crate) fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("expected rank-2 tensor, got {s:?}"))),
        }
    }

    fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    fn any_grad(parts: &[&Tensor]) -> bool {
        parts.iter().any(|t| t.inner.requires_grad)
    }

    fn unary(&self, data: Vec<f32>, op: impl FnOnce(Tensor) -> Op) -> Tensor {
        if self.inner.requires_grad {
            Tensor::from_op(self.inner.shape.clone(), data, op(self.clone()))
        } else {
            Tensor::leaf(self.inner.shape.clone(), data, false).expect("consistent")
        }
    }

    fn binary(
        &self,
        other: &Tensor,
        data: Vec<f32>,
        shape: Vec<usize>,
        op: impl FnOnce(Tensor, Tensor) -> Op,
    ) -> Tensor {
        if Self::any_grad(&[self, other]) {
            Tensor::from_op(shape, data, op(self.clone(), other.clone()))
        } else {
            Tensor::leaf(shape, data, false).expect("consistent")
        }
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(self.binary(other, data, self.inner.shape.clone(), Op::Add))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(self.binary(other, data, self.inner.shape.clone(), Op::Sub))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(self.binary(other, data, self.inner.shape.clone(), Op::Mul))
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        self.unary(data, |t| Op::Scale(t, factor))
    }

    pub fn add_scalar(&self, shift: f32) -> Tensor {
        let data = self.data().iter().map(|v| v + shift).collect();
        self.unary(data, Op::AddScalar)
    }

    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.abs()).collect();
        self.unary(data, Op::Abs)
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.exp()).collect();
        self.unary(data, Op::Exp)
    }

    pub fn ln(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.ln()).collect();
        self.unary(data, Op::Ln)
    }

    pub fn sqrt(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.sqrt()).collect();
        self.unary(data, Op::Sqrt)
    }

    pub fn recip(&self) -> Tensor {
        let data = self.data().iter().map(|v| 1.0 / v).collect();
        self.unary(data, Op::Recip)
    }

    pub fn silu(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&v| v * (1.0 / (1.0 + (-v).exp())))
            .collect();
        self.unary(data, Op::Silu)
    }

    pub fn leaky_relu(&self, slope: f32) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        self.unary(data, |t| Op::LeakyRelu(t, slope))
    }

    /// Clamped copy; intentionally not differentiable (export-boundary only).
    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        let data = self.data().iter().map(|v| v.clamp(lo, hi)).collect();
        Tensor::leaf(self.inner.shape.clone(), data, false).expect("consistent")
    }

    pub fn max_value(&self) -> f32 {
        self.data().iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        if self.inner.requires_grad {
            Tensor::from_op(vec![1], vec![s as f32], Op::Sum(self.clone()))
        } else {
            Tensor::scalar(s as f32)
        }
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let m = (s / self.len() as f64) as f32;
        if self.inner.requires_grad {
            Tensor::from_op(vec![1], vec![m], Op::Mean(self.clone()))
        } else {
            Tensor::scalar(m)
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other)?;
        let s: f64 = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        Ok(self.binary(other, vec![s as f32], vec![1], Op::Dot))
    }

    /// Broadcast-multiply by a single-element tensor.
    pub fn mul_scalar_tensor(&self, s: &Tensor) -> Result<Tensor> {
        if s.len() != 1 {
            return Err(Error::dim("scale tensor must hold exactly one element"));
        }
        let f = s.data()[0];
        let data = self.data().iter().map(|v| v * f).collect();
        Ok(self.binary(s, data, self.inner.shape.clone(), |x, s| Op::MulScalarT(x, s)))
    }

    /// Mean absolute difference (the L1 training criterion).
    pub fn l1_distance(&self, other: &Tensor) -> Result<Tensor> {
        Ok(self.sub(other)?.abs().mean())
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let count: usize = shape.iter().product();
        if count != self.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        if self.inner.requires_grad {
            Ok(Tensor::from_op(
                shape.to_vec(),
                self.to_vec(),
                Op::Reshape(self.clone()),
            ))
        } else {
            Tensor::new(shape, self.to_vec())
        }
    }

    // ---- linear algebra --------------------------------------------------

    /// `w @ x + b` for a vector `x` of shape `[in]`, `w` of `[out, in]`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let (out_dim, in_dim) = w.dims2()?;
        if self.shape() != [in_dim] {
            return Err(Error::dim(format!(
                "linear expects input [{in_dim}], got {:?}",
                self.shape()
            )));
        }
        if let Some(b) = b {
            if b.shape() != [out_dim] {
                return Err(Error::dim(format!(
                    "linear bias must be [{out_dim}], got {:?}",
                    b.shape()
                )));
            }
        }
        let x = self.data();
        let wd = w.data();
        let mut y = vec![0.0f32; out_dim];
        for o in 0..out_dim {
            let row = &wd[o * in_dim..(o + 1) * in_dim];
            let mut acc = 0.0f64;
            for (a, b) in row.iter().zip(x) {
                acc += *a as f64 * *b as f64;
            }
            if let Some(b) = b {
                acc += b.data()[o] as f64;
            }
            y[o] = acc as f32;
        }
        let grad = Self::any_grad(&[self, w]) || b.map_or(false, |b| b.requires_grad());
        if grad {
            Ok(Tensor::from_op(
                vec![out_dim],
                y,
                Op::Linear {
                    x: self.clone(),
                    w: w.clone(),
                    b: b.cloned(),
                },
            ))
        } else {
            Tensor::new(&[out_dim], y)
        }
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar output. Returns the gradient of this
    /// scalar with respect to every reachable gradient-tracking tensor.
    pub fn backward(&self) -> Result<Gradients> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        if !self.inner.requires_grad {
            return Ok(Gradients { map: grads });
        }
        let order = self.topo_order();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(grad_out) = grads.get(&node.id()).cloned() else {
                continue;
            };
            if let Some(op) = &node.inner.op {
                node.backward_op(op, &grad_out, &mut grads);
            }
        }
        Ok(Gradients { map: grads })
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child_idx)) = stack.pop() {
            let parents = node.op_parents();
            if child_idx < parents.len() {
                stack.push((node.clone(), child_idx + 1));
                let p = &parents[child_idx];
                if p.inner.requires_grad && visited.insert(p.id()) {
                    stack.push((p.clone(), 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    fn op_parents(&self) -> Vec<Tensor> {
        let Some(op) = &self.inner.op else {
            return Vec::new();
        };
        match op {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Dot(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::MulScalarT(a, b) => vec![a.clone(), b.clone()],
            Op::Scale(t, _)
            | Op::AddScalar(t)
            | Op::Abs(t)
            | Op::Exp(t)
            | Op::Ln(t)
            | Op::Sqrt(t)
            | Op::Recip(t)
            | Op::Silu(t)
            | Op::LeakyRelu(t, _)
            | Op::Sum(t)
            | Op::Mean(t)
            | Op::Reshape(t)
            | Op::PixelFold(t)
            | Op::PixelShuffle(t)
            | Op::NearestResize(t)
            | Op::Gap(t) => vec![t.clone()],
            Op::Linear { x, w, b } => {
                let mut v = vec![x.clone(), w.clone()];
                if let Some(b) = b {
                    v.push(b.clone());
                }
                v
            }
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x.clone(), w.clone()];
                if let Some(b) = b {
                    v.push(b.clone());
                }
                v
            }
            Op::DepthwiseConv3x3 { x, k } => vec![x.clone(), k.clone()],
            Op::GroupNorm { x, gamma, beta, .. } => {
                vec![x.clone(), gamma.clone(), beta.clone()]
            }
            Op::ChannelAffine { x, gamma, beta, .. } => {
                vec![x.clone(), gamma.clone(), beta.clone()]
            }
            Op::ConcatDim0(parts) => parts.clone(),
            Op::AddChannelBias { x, bias } => vec![x.clone(), bias.clone()],
        }
    }

    fn backward_op(&self, op: &Op, grad_out: &[f32], grads: &mut HashMap<u64, Vec<f32>>) {
        match op {
            Op::Add(a, b) => {
                accumulate(grads, a, |g| add_assign(g, grad_out));
                accumulate(grads, b, |g| add_assign(g, grad_out));
            }
            Op::Sub(a, b) => {
                accumulate(grads, a, |g| add_assign(g, grad_out));
                accumulate(grads, b, |g| sub_assign(g, grad_out));
            }
            Op::Mul(a, b) => {
                accumulate(grads, a, |g| {
                    for ((g, &go), &bv) in g.iter_mut().zip(grad_out).zip(b.data()) {
                        *g += go * bv;
                    }
                });
                accumulate(grads, b, |g| {
                    for ((g, &go), &av) in g.iter_mut().zip(grad_out).zip(a.data()) {
                        *g += go * av;
                    }
                });
            }
            Op::Scale(t, f) => accumulate(grads, t, |g| {
                for (g, &go) in g.iter_mut().zip(grad_out) {
                    *g += go * f;
                }
            }),
            Op::AddScalar(t) => accumulate(grads, t, |g| add_assign(g, grad_out)),
            Op::Abs(t) => accumulate(grads, t, |g| {
                for ((g, &go), &x) in g.iter_mut().zip(grad_out).zip(t.data()) {
                    *g += go * if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }),
            Op::Exp(t) => accumulate(grads, t, |g| {
                for ((g, &go), &y) in g.iter_mut().zip(grad_out).zip(self.data()) {
                    *g += go * y;
                }
            }),
            Op::Ln(t) => accumulate(grads, t, |g| {
                for ((g, &go), &x) in g.iter_mut().zip(grad_out).zip(t.data()) {
                    *g += go / x;
                }
            }),
            Op::Sqrt(t) => accumulate(grads, t, |g| {
                for ((g, &go), &y) in g.iter_mut().zip(grad_out).zip(self.data()) {
                    *g += go * 0.5 / y;
                }
            }),
            Op::Recip(t) => accumulate(grads, t, |g| {
                for ((g, &go), &y) in g.iter_mut().zip(grad_out).zip(self.data()) {
                    *g -= go * y * y;
                }
            }),
            Op::Silu(t) => accumulate(grads, t, |g| {
                for ((g, &go), &x) in g.iter_mut().zip(grad_out).zip(t.data()) {
                    let s = 1.0 / (1.0 + (-x).exp());
                    *g += go * s * (1.0 + x * (1.0 - s));
                }
            }),
            Op::LeakyRelu(t, slope) => accumulate(grads, t, |g| {
                for ((g, &go), &x) in g.iter_mut().zip(grad_out).zip(t.data()) {
                    *g += go * if x >= 0.0 { 1.0 } else { *slope };
                }
            }),
            Op::Sum(t) => accumulate(grads, t, |g| {
                for g in g.iter_mut() {
                    *g += grad_out[0];
                }
            }),
            Op::Mean(t) => {
                let f = grad_out[0] / t.len() as f32;
                accumulate(grads, t, |g| {
                    for g in g.iter_mut() {
                        *g += f;
                    }
                });
            }
            Op::Dot(a, b) => {
                let go = grad_out[0];
                accumulate(grads, a, |g| {
                    for (g, &bv) in g.iter_mut().zip(b.data()) {
                        *g += go * bv;
                    }
                });
                accumulate(grads, b, |g| {
                    for (g, &av) in g.iter_mut().zip(a.data()) {
                        *g += go * av;
                    }
                });
            }
            Op::MulScalarT(x, s) => {
                let f = s.data()[0];
                accumulate(grads, x, |g| {
                    for (g, &go) in g.iter_mut().zip(grad_out) {
                        *g += go * f;
                    }
                });
                let gs: f64 = grad_out
                    .iter()
                    .zip(x.data())
                    .map(|(&go, &xv)| go as f64 * xv as f64)
                    .sum();
                accumulate(grads, s, |g| g[0] += gs as f32);
            }
            Op::Linear { x, w, b } => {
                let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
                accumulate(grads, x, |g| {
                    let wd = w.data();
                    for o in 0..out_dim {
                        let go = grad_out[o];
                        let row = &wd[o * in_dim..(o + 1) * in_dim];
                        for (g, &wv) in g.iter_mut().zip(row) {
                            *g += go * wv;
                        }
                    }
                });
                accumulate(grads, w, |g| {
                    let xd = x.data();
                    for o in 0..out_dim {
                        let go = grad_out[o];
                        let row = &mut g[o * in_dim..(o + 1) * in_dim];
                        for (g, &xv) in row.iter_mut().zip(xd) {
                            *g += go * xv;
                        }
                    }
                });
                if let Some(b) = b {
                    accumulate(grads, b, |g| add_assign(g, grad_out));
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                conv::conv2d_backward(x, w, b.as_ref(), *stride, grad_out, grads);
            }
            Op::DepthwiseConv3x3 { x, k } => {
                conv::depthwise_backward(x, k, grad_out, grads);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                norm::group_norm_backward(x, gamma, beta, *groups, mean, rstd, grad_out, grads);
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                shift,
                scale,
            } => {
                norm::channel_affine_backward(x, gamma, beta, shift, scale, grad_out, grads);
            }
            Op::Reshape(t) => accumulate(grads, t, |g| add_assign(g, grad_out)),
            Op::ConcatDim0(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.len();
                    let slice = &grad_out[offset..offset + n];
                    accumulate(grads, p, |g| add_assign(g, slice));
                    offset += n;
                }
            }
            Op::PixelFold(t) => shape_ops::pixel_fold_backward(t, grad_out, grads),
            Op::PixelShuffle(t) => shape_ops::pixel_shuffle_backward(t, grad_out, grads),
            Op::NearestResize(t) => {
                shape_ops::nearest_resize_backward(t, self.shape(), grad_out, grads)
            }
            Op::Gap(t) => shape_ops::gap_backward(t, grad_out, grads),
            Op::AddChannelBias { x, bias } => {
                accumulate(grads, x, |g| add_assign(g, grad_out));
                let (c, h, w) = x.dims3().expect("validated in forward");
                accumulate(grads, bias, |g| {
                    for ch in 0..c {
                        let mut acc = 0.0f64;
                        for v in &grad_out[ch * h * w..(ch + 1) * h * w] {
                            acc += *v as f64;
                        }
                        g[ch] += acc as f32;
                    }
                });
            }
        }
    }
}

fn add_assign(g: &mut [f32], src: &[f32]) {
    for (g, &s) in g.iter_mut().zip(src) {
        *g += s;
    }
}

fn sub_assign(g: &mut [f32], src: &[f32]) {
    for (g, &s) in g.iter_mut().zip(src) {
        *g -= s;
    }
}

pub(crate) fn accumulate(
    grads: &mut HashMap<u64, Vec<f32>>,
    parent: &Tensor,
    write: impl FnOnce(&mut [f32]),
) {
    if !parent.requires_grad() {
        return;
    }
    let entry = grads
        .entry(parent.id())
        .or_insert_with(|| vec![0.0; parent.len()]);
    write(entry);
}

/// Result of a backward sweep: gradient buffers keyed by tensor identity.
pub struct Gradients {
    map: HashMap<u64, Vec<f32>>,
}

impl Gradients {
    /// Gradient with respect to `t`, if `t` was part of the graph.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f32]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn l2_norm(&self, t: &Tensor) -> Option<f64> {
        self.wrt(t)
            .map(|g| g.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_mul_values() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let b = t(&[3], &[4.0, 5.0, 6.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[4.0, 10.0, 18.0]);
        assert!(a.add(&t(&[2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn backward_through_product_chain() {
        // f = sum(a * b) -> df/da = b, df/db = a
        let a = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::param(&[3], vec![-1.0, 0.5, 2.0]).unwrap();
        let f = a.mul(&b).unwrap().sum();
        let g = f.backward().unwrap();
        assert_eq!(g.wrt(&a).unwrap(), b.data());
        assert_eq!(g.wrt(&b).unwrap(), a.data());
    }

    #[test]
    fn backward_shared_subexpression_accumulates() {
        // f = sum(x + x) -> df/dx = 2
        let x = Tensor::param(&[2], vec![1.0, -3.0]).unwrap();
        let f = x.add(&x).unwrap().sum();
        let g = f.backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0);
        assert!(y.backward().is_err());
    }

    #[test]
    fn detach_cuts_graph() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(3.0).detach();
        let f = y.sum();
        let g = f.backward().unwrap();
        assert!(g.wrt(&x).is_none());
    }

    #[test]
    fn mean_reduction_gradient() {
        let x = Tensor::param(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = x.mean().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn linear_matches_manual() {
        let x = t(&[2], &[1.0, 2.0]);
        let w = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = t(&[3], &[0.5, -0.5, 0.0]);
        let y = x.linear(&w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5, 3.0]);
    }
}
