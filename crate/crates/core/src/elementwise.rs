//! Pointwise unary and binary operations.
//!
//! Binary operations accept equal shapes, or a single-channel operand that is
//! broadcast across the channels of the other one.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryFn {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Abs,
    Neg,
    Square,
}

impl UnaryFn {
    pub fn name(self) -> &'static str {
        match self {
            UnaryFn::Sigmoid => "sigmoid",
            UnaryFn::Tanh => "tanh",
            UnaryFn::Relu => "relu",
            UnaryFn::Exp => "exp",
            UnaryFn::Log => "log",
            UnaryFn::Abs => "abs",
            UnaryFn::Neg => "neg",
            UnaryFn::Square => "square",
        }
    }

    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryFn::Sigmoid => {
                // split on sign so exp never overflows
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
            UnaryFn::Tanh => x.tanh(),
            UnaryFn::Relu => x.max(T::zero()),
            UnaryFn::Exp => x.exp(),
            UnaryFn::Log => x.ln(),
            UnaryFn::Abs => x.abs(),
            UnaryFn::Neg => -x,
            UnaryFn::Square => x * x,
        }
    }

    /// d f(x) / dx, given both the input and the output.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            UnaryFn::Sigmoid => y * (T::one() - y),
            UnaryFn::Tanh => T::one() - y * y,
            UnaryFn::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryFn::Exp => y,
            UnaryFn::Log => T::one() / x,
            UnaryFn::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            UnaryFn::Neg => -T::one(),
            UnaryFn::Square => x + x,
        }
    }
}

pub fn elementwise<T: Scalar>(input: &Tensor<T>, f: UnaryFn) -> Result<Tensor<T>> {
    if f == UnaryFn::Log {
        if let Some(v) = input.data().iter().find(|&&v| v <= T::zero()) {
            return Err(Error::Numeric {
                op: "log",
                detail: format!("non-positive argument {v}"),
            });
        }
    }
    input.map(|v| f.apply(v)).ensure_finite(f.name())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryFn {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryFn {
    pub fn name(self) -> &'static str {
        match self {
            BinaryFn::Add => "add",
            BinaryFn::Sub => "sub",
            BinaryFn::Mul => "mul",
            BinaryFn::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryFn::Add => a + b,
            BinaryFn::Sub => a - b,
            BinaryFn::Mul => a * b,
            BinaryFn::Div => a / b,
        }
    }
}

/// How the operands of a binary op line up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// Left operand has one channel.
    Lhs,
    /// Right operand has one channel.
    Rhs,
}

pub(crate) fn broadcast_shapes(op: &'static str, a: Shape, b: Shape) -> Result<(Shape, Broadcast)> {
    if a == b {
        return Ok((a, Broadcast::Same));
    }
    let same_grid = a.n == b.n && a.h == b.h && a.w == b.w;
    if same_grid && a.c == 1 {
        return Ok((b, Broadcast::Lhs));
    }
    if same_grid && b.c == 1 {
        return Ok((a, Broadcast::Rhs));
    }
    Err(Error::shape(op, format!("{a:?} and {b:?} do not broadcast")))
}

/// Maps an output element index to the index of a broadcast operand.
#[inline]
pub(crate) fn broadcast_index(i: usize, out: Shape) -> usize {
    let plane = out.plane();
    let n = i / (out.c * plane);
    n * plane + i % plane
}

pub fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: BinaryFn) -> Result<Tensor<T>> {
    let (shape, mode) = broadcast_shapes(f.name(), a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<T> = match mode {
        Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f.apply(x, y)).collect(),
        Broadcast::Lhs => (0..shape.numel())
            .map(|i| f.apply(ad[broadcast_index(i, shape)], bd[i]))
            .collect(),
        Broadcast::Rhs => (0..shape.numel())
            .map(|i| f.apply(ad[i], bd[broadcast_index(i, shape)]))
            .collect(),
    };
    Tensor::from_vec(shape, data)?.ensure_finite(f.name())
}

/// Sums a full-shape gradient down to a single channel.
pub(crate) fn reduce_to_single_channel<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let mut out = Tensor::zeros(s.with_channels(1));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = g.plane(n, c);
            for (o, &v) in out.plane_mut(n, 0).iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    out
}
