//! Reverse-mode differentiation.
//!
//! A [`Var`] is a reference-counted node holding its value and, when any
//! input requires a gradient, the operation that produced it. Values that do
//! not depend on a parameter carry no history, so inference runs without
//! retaining intermediates.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::conv::{self, ConvSpec};
use crate::elementwise::{
    self, broadcast_index, broadcast_shapes, reduce_to_single_channel, BinaryFn, Broadcast, UnaryFn,
};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Shape, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

enum Op<T: Scalar> {
    Conv2d {
        input: Var<T>,
        weight: Var<T>,
        bias: Option<Var<T>>,
        spec: ConvSpec,
    },
    ConvTranspose {
        input: Var<T>,
        weight: Var<T>,
        bias: Option<Var<T>>,
        spec: ConvSpec,
    },
    Unary(Var<T>, UnaryFn),
    Binary(Var<T>, Var<T>, BinaryFn),
    Scale(Var<T>, T),
    Concat(Vec<Var<T>>),
    SliceChannels(Var<T>, usize),
    Sum(Var<T>),
    ChannelMean(Var<T>),
    Warp { src: Var<T>, flow: Var<T> },
    AvgPool2(Var<T>),
    Laplacian(Var<T>),
    Box3(Var<T>),
    /// Operations with no usable derivative; backpropagating into one fails.
    NonDifferentiable(&'static str, Vec<Var<T>>),
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<&Var<T>> {
        match self {
            Op::Conv2d { input, weight, bias, .. } | Op::ConvTranspose { input, weight, bias, .. } => {
                let mut v = vec![input, weight];
                v.extend(bias.iter());
                v
            }
            Op::Unary(a, _)
            | Op::Scale(a, _)
            | Op::SliceChannels(a, _)
            | Op::Sum(a)
            | Op::ChannelMean(a)
            | Op::AvgPool2(a)
            | Op::Laplacian(a)
            | Op::Box3(a) => vec![a],
            Op::Binary(a, b, _) => vec![a, b],
            Op::Warp { src, flow } => vec![src, flow],
            Op::Concat(parts) | Op::NonDifferentiable(_, parts) => parts.iter().collect(),
        }
    }
}

struct Node<T: Scalar> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

#[derive(Clone)]
pub struct Var<T: Scalar>(Arc<Node<T>>);

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    /// A leaf that does not take part in differentiation.
    pub fn constant(value: Tensor<T>) -> Self {
        Var(Arc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            op: None,
        }))
    }

    /// A leaf whose gradient is collected by [`backward`].
    pub fn param(value: Tensor<T>) -> Self {
        Var(Arc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            op: None,
        }))
    }

    pub fn scalar(value: T) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    fn from_op(value: Tensor<T>, op: Op<T>) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Var(Arc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op: requires_grad.then_some(op),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> Shape {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, no history.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.0.value.data()[0]
    }

    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, spec: &ConvSpec) -> Result<Self> {
        let value = conv::conv2d(self.value(), weight.value(), bias.map(|b| b.value()), spec)?;
        Ok(Self::from_op(
            value,
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                spec: *spec,
            },
        ))
    }

    pub fn conv2d_transpose(&self, weight: &Var<T>, bias: Option<&Var<T>>, spec: &ConvSpec) -> Result<Self> {
        let value = conv::conv2d_transpose(self.value(), weight.value(), bias.map(|b| b.value()), spec)?;
        Ok(Self::from_op(
            value,
            Op::ConvTranspose {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                spec: *spec,
            },
        ))
    }

    pub fn unary(&self, f: UnaryFn) -> Result<Self> {
        let value = elementwise::elementwise(self.value(), f)?;
        Ok(Self::from_op(value, Op::Unary(self.clone(), f)))
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.unary(UnaryFn::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Self> {
        self.unary(UnaryFn::Tanh)
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(UnaryFn::Relu)
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary(UnaryFn::Exp)
    }

    pub fn log(&self) -> Result<Self> {
        self.unary(UnaryFn::Log)
    }

    pub fn abs(&self) -> Result<Self> {
        self.unary(UnaryFn::Abs)
    }

    pub fn neg(&self) -> Result<Self> {
        self.unary(UnaryFn::Neg)
    }

    pub fn square(&self) -> Result<Self> {
        self.unary(UnaryFn::Square)
    }

    pub fn binary(&self, other: &Var<T>, f: BinaryFn) -> Result<Self> {
        let value = elementwise::binary(self.value(), other.value(), f)?;
        Ok(Self::from_op(value, Op::Binary(self.clone(), other.clone(), f)))
    }

    pub fn add(&self, other: &Var<T>) -> Result<Self> {
        self.binary(other, BinaryFn::Add)
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Self> {
        self.binary(other, BinaryFn::Sub)
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Self> {
        self.binary(other, BinaryFn::Mul)
    }

    pub fn div(&self, other: &Var<T>) -> Result<Self> {
        self.binary(other, BinaryFn::Div)
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        let value = self.value().map(|v| v * factor).ensure_finite("scale")?;
        Ok(Self::from_op(value, Op::Scale(self.clone(), factor)))
    }

    /// `factor * x + offset`; the offset carries no gradient.
    pub fn affine(&self, factor: T, offset: T) -> Result<Self> {
        let scaled = self.scale(factor)?;
        if offset == T::zero() {
            return Ok(scaled);
        }
        scaled.add(&Var::constant(Tensor::full(self.shape(), offset)))
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Result<Self> {
        self.affine(-T::one(), T::one())
    }

    pub fn concat(parts: &[&Var<T>]) -> Result<Self> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat_channels(&values)?;
        Ok(Self::from_op(value, Op::Concat(parts.iter().map(|&p| p.clone()).collect())))
    }

    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        let value = self.value().slice_channels(start, count)?;
        Ok(Self::from_op(value, Op::SliceChannels(self.clone(), start)))
    }

    pub fn sum(&self) -> Result<Self> {
        let value = Tensor::scalar(self.value().sum()).ensure_finite("sum")?;
        Ok(Self::from_op(value, Op::Sum(self.clone())))
    }

    pub fn mean(&self) -> Result<Self> {
        let n = T::lit(self.value().len() as f64);
        self.sum()?.scale(T::one() / n)
    }

    /// Mean over the channel axis, keeping a single channel.
    pub fn channel_mean(&self) -> Result<Self> {
        let c = self.shape().c;
        let value = reduce_to_single_channel(self.value()).map(|v| v / T::lit(c as f64));
        Ok(Self::from_op(value, Op::ChannelMean(self.clone())))
    }

    pub fn warp(&self, flow: &Var<T>) -> Result<Self> {
        let value = kernels::bilinear_warp(self.value(), flow.value())?;
        Ok(Self::from_op(
            value,
            Op::Warp {
                src: self.clone(),
                flow: flow.clone(),
            },
        ))
    }

    pub fn avg_pool2(&self) -> Result<Self> {
        let value = kernels::avg_pool2(self.value())?;
        Ok(Self::from_op(value, Op::AvgPool2(self.clone())))
    }

    pub fn laplacian(&self) -> Result<Self> {
        let value = kernels::laplacian(self.value())?;
        Ok(Self::from_op(value, Op::Laplacian(self.clone())))
    }

    pub fn box3(&self) -> Result<Self> {
        let value = kernels::box3(self.value());
        Ok(Self::from_op(value, Op::Box3(self.clone())))
    }

    /// `1` where `x > threshold`, else `0`. Has no derivative.
    pub fn greater_than(&self, threshold: T) -> Result<Self> {
        let value = self
            .value()
            .map(|v| if v > threshold { T::one() } else { T::zero() });
        Ok(Self::from_op(
            value,
            Op::NonDifferentiable("greater_than", vec![self.clone()]),
        ))
    }
}

/// Gradients of a scalar w.r.t. every parameter leaf it depends on.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    by_id: HashMap<u64, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`; zero when the output does not depend on it.
    pub fn get(&self, var: &Var<T>) -> Tensor<T> {
        self.by_id
            .get(&var.id())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn contains(&self, var: &Var<T>) -> bool {
        self.by_id.contains_key(&var.id())
    }
}

fn accumulate<T: Scalar>(grads: &mut HashMap<u64, Tensor<T>>, var: &Var<T>, g: Tensor<T>) {
    if !var.requires_grad() {
        return;
    }
    match grads.get_mut(&var.id()) {
        Some(acc) => acc.add_assign(&g),
        None => {
            grads.insert(var.id(), g);
        }
    }
}

/// Backpropagates from a single-element `output`.
pub fn backward<T: Scalar>(output: &Var<T>) -> Result<Gradients<T>> {
    if output.value().len() != 1 {
        return Err(Error::shape(
            "backward",
            format!("output must be a scalar, got {:?}", output.shape()),
        ));
    }
    // Ids increase monotonically, so descending id order is a reverse
    // topological order of the reachable subgraph.
    let mut nodes: Vec<Var<T>> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        if let Some(op) = &v.0.op {
            stack.extend(op.parents().into_iter().cloned());
        }
        nodes.push(v);
    }
    nodes.sort_by(|a, b| b.id().cmp(&a.id()));

    let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
    let mut leaves: HashMap<u64, Tensor<T>> = HashMap::new();
    grads.insert(output.id(), Tensor::ones(output.shape()));
    for node in &nodes {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        match &node.0.op {
            None => {
                leaves.insert(node.id(), g);
            }
            Some(op) => propagate(op, node.value(), &g, &mut grads)?,
        }
    }
    Ok(Gradients { by_id: leaves })
}

fn propagate<T: Scalar>(
    op: &Op<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
    grads: &mut HashMap<u64, Tensor<T>>,
) -> Result<()> {
    match op {
        Op::Conv2d { input, weight, bias, spec } => {
            let (dx, dw, db) = conv::conv2d_backward(input.value(), weight.value(), g, spec);
            accumulate(grads, input, dx);
            accumulate(grads, weight, dw);
            if let Some(b) = bias {
                accumulate(grads, b, db.reshape(b.shape())?);
            }
        }
        Op::ConvTranspose { input, weight, bias, spec } => {
            let (dx, dw, db) = conv::conv2d_transpose_backward(input.value(), weight.value(), g, spec);
            accumulate(grads, input, dx);
            accumulate(grads, weight, dw);
            if let Some(b) = bias {
                accumulate(grads, b, db.reshape(b.shape())?);
            }
        }
        Op::Unary(x, f) => {
            let xd = x.value().data();
            let data = g
                .data()
                .iter()
                .zip(xd)
                .zip(out.data())
                .map(|((&gi, &xi), &yi)| gi * f.derivative(xi, yi))
                .collect();
            accumulate(grads, x, Tensor::from_vec(x.shape(), data)?);
        }
        Op::Binary(a, b, f) => binary_backward(a, b, *f, g, grads)?,
        Op::Scale(x, factor) => accumulate(grads, x, g.map(|v| v * *factor)),
        Op::Concat(parts) => {
            let mut start = 0;
            for p in parts {
                let c = p.shape().c;
                accumulate(grads, p, g.slice_channels(start, c)?);
                start += c;
            }
        }
        Op::SliceChannels(x, start) => {
            let s = x.shape();
            let count = g.shape().c;
            let mut dx = Tensor::zeros(s);
            for n in 0..s.n {
                for c in 0..count {
                    dx.plane_mut(n, start + c).copy_from_slice(g.plane(n, c));
                }
            }
            accumulate(grads, x, dx);
        }
        Op::Sum(x) => accumulate(grads, x, Tensor::full(x.shape(), g.data()[0])),
        Op::ChannelMean(x) => {
            let s = x.shape();
            let inv = T::one() / T::lit(s.c as f64);
            let mut dx = Tensor::zeros(s);
            for n in 0..s.n {
                for c in 0..s.c {
                    for (d, &v) in dx.plane_mut(n, c).iter_mut().zip(g.plane(n, 0)) {
                        *d = v * inv;
                    }
                }
            }
            accumulate(grads, x, dx);
        }
        Op::Warp { src, flow } => {
            let (ds, df) = kernels::bilinear_warp_backward(src.value(), flow.value(), g);
            accumulate(grads, src, ds);
            accumulate(grads, flow, df);
        }
        Op::AvgPool2(x) => accumulate(grads, x, kernels::avg_pool2_backward(x.shape(), g)),
        Op::Laplacian(x) => accumulate(grads, x, kernels::laplacian_backward(g)),
        Op::Box3(x) => accumulate(grads, x, kernels::box3_backward(g)),
        Op::NonDifferentiable(name, _) => return Err(Error::NonDifferentiable(name)),
    }
    Ok(())
}

fn binary_backward<T: Scalar>(
    a: &Var<T>,
    b: &Var<T>,
    f: BinaryFn,
    g: &Tensor<T>,
    grads: &mut HashMap<u64, Tensor<T>>,
) -> Result<()> {
    let (shape, mode) = broadcast_shapes(f.name(), a.shape(), b.shape())?;
    let (ad, bd, gd) = (a.value().data(), b.value().data(), g.data());
    let ai = |i: usize| if mode == Broadcast::Lhs { broadcast_index(i, shape) } else { i };
    let bi = |i: usize| if mode == Broadcast::Rhs { broadcast_index(i, shape) } else { i };
    let n = shape.numel();
    let (da, db): (Vec<T>, Vec<T>) = match f {
        BinaryFn::Add => (gd.to_vec(), gd.to_vec()),
        BinaryFn::Sub => (gd.to_vec(), gd.iter().map(|&v| -v).collect()),
        BinaryFn::Mul => (
            (0..n).map(|i| gd[i] * bd[bi(i)]).collect(),
            (0..n).map(|i| gd[i] * ad[ai(i)]).collect(),
        ),
        BinaryFn::Div => (
            (0..n).map(|i| gd[i] / bd[bi(i)]).collect(),
            (0..n)
                .map(|i| {
                    let y = bd[bi(i)];
                    -gd[i] * ad[ai(i)] / (y * y)
                })
                .collect(),
        ),
    };
    let full = |d: Vec<T>| Tensor::from_vec(shape, d);
    let da = full(da)?;
    let db = full(db)?;
    let da = if mode == Broadcast::Lhs { reduce_to_single_channel(&da) } else { da };
    let db = if mode == Broadcast::Rhs { reduce_to_single_channel(&db) } else { db };
    if a.id() == b.id() {
        let mut both = da;
        both.add_assign(&db);
        accumulate(grads, a, both);
    } else {
        accumulate(grads, a, da);
        accumulate(grads, b, db);
    }
    Ok(())
}
