//! Image-domain kernels on raw tensors: bilinear warping, 2× average pooling,
//! the replicate-padded Laplacian and 3×3 box filter, with their adjoints.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Bilinear tap positions for one clamped sample coordinate.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
    /// Whether the unclamped coordinate was inside the valid range; the
    /// derivative w.r.t. the coordinate is zero otherwise.
    inside: bool,
}

impl<T: Scalar> Tap<T> {
    fn new(coord: T, len: usize) -> Self {
        if len == 1 {
            return Tap { i0: 0, i1: 0, frac: T::zero(), inside: false };
        }
        let max = T::lit((len - 1) as f64);
        let inside = coord >= T::zero() && coord <= max;
        let c = coord.max(T::zero()).min(max);
        let mut i0 = c.floor().to_usize().unwrap_or(0);
        if i0 >= len - 1 {
            i0 = len - 2;
        }
        let frac = c - T::lit(i0 as f64);
        Tap { i0, i1: i0 + 1, frac, inside }
    }
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    if t == T::zero() {
        a
    } else if t == T::one() {
        b
    } else {
        (T::one() - t) * a + t * b
    }
}

fn check_flow<T: Scalar>(op: &'static str, src: &Tensor<T>, flow: &Tensor<T>) -> Result<()> {
    let (s, f) = (src.shape(), flow.shape());
    if f.c != 2 {
        return Err(Error::shape(op, format!("flow must have 2 channels, got {f:?}")));
    }
    if s.n != f.n || s.h != f.h || s.w != f.w {
        return Err(Error::shape(op, format!("source {s:?} vs flow {f:?}")));
    }
    Ok(())
}

/// `out(p) = src(p + flow(p))`, sampled bilinearly with coordinates clamped
/// to the image.
pub fn bilinear_warp<T: Scalar>(src: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    check_flow("bilinear_warp", src, flow)?;
    let s = src.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let fx = flow.plane(n, 0);
        let fy = flow.plane(n, 1);
        for y in 0..s.h {
            for x in 0..s.w {
                let i = y * s.w + x;
                let tx = Tap::new(T::lit(x as f64) + fx[i], s.w);
                let ty = Tap::new(T::lit(y as f64) + fy[i], s.h);
                for c in 0..s.c {
                    let p = src.plane(n, c);
                    let top = lerp(p[ty.i0 * s.w + tx.i0], p[ty.i0 * s.w + tx.i1], tx.frac);
                    let bot = lerp(p[ty.i1 * s.w + tx.i0], p[ty.i1 * s.w + tx.i1], tx.frac);
                    out.plane_mut(n, c)[i] = lerp(top, bot, ty.frac);
                }
            }
        }
    }
    out.ensure_finite("bilinear_warp")
}

/// Gradients of `bilinear_warp` w.r.t. the source and the flow.
pub fn bilinear_warp_backward<T: Scalar>(
    src: &Tensor<T>,
    flow: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = src.shape();
    let mut dsrc = Tensor::zeros(s);
    let mut dflow = Tensor::zeros(flow.shape());
    let one = T::one();
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let i = y * s.w + x;
                let fxv = flow.plane(n, 0)[i];
                let fyv = flow.plane(n, 1)[i];
                let tx = Tap::new(T::lit(x as f64) + fxv, s.w);
                let ty = Tap::new(T::lit(y as f64) + fyv, s.h);
                let (wx, wy) = (tx.frac, ty.frac);
                let (mut gx, mut gy) = (T::zero(), T::zero());
                for c in 0..s.c {
                    let g = grad_out.plane(n, c)[i];
                    if g == T::zero() {
                        continue;
                    }
                    let p = src.plane(n, c);
                    let v00 = p[ty.i0 * s.w + tx.i0];
                    let v01 = p[ty.i0 * s.w + tx.i1];
                    let v10 = p[ty.i1 * s.w + tx.i0];
                    let v11 = p[ty.i1 * s.w + tx.i1];
                    let d = dsrc.plane_mut(n, c);
                    d[ty.i0 * s.w + tx.i0] += g * (one - wx) * (one - wy);
                    d[ty.i0 * s.w + tx.i1] += g * wx * (one - wy);
                    d[ty.i1 * s.w + tx.i0] += g * (one - wx) * wy;
                    d[ty.i1 * s.w + tx.i1] += g * wx * wy;
                    if tx.inside {
                        gx += g * ((one - wy) * (v01 - v00) + wy * (v11 - v10));
                    }
                    if ty.inside {
                        gy += g * ((one - wx) * (v10 - v00) + wx * (v11 - v01));
                    }
                }
                dflow.plane_mut(n, 0)[i] = gx;
                dflow.plane_mut(n, 1)[i] = gy;
            }
        }
    }
    (dsrc, dflow)
}

/// 2×2 average pooling.
pub fn avg_pool2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape(
            "downsample2x",
            format!("spatial size {}x{} must be even", s.h, s.w),
        ));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let quarter = T::lit(0.25);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let p = input.plane(n, c);
            let o = out.plane_mut(n, c);
            for y in 0..oh {
                let r0 = &p[2 * y * s.w..(2 * y + 1) * s.w];
                let r1 = &p[(2 * y + 1) * s.w..(2 * y + 2) * s.w];
                for x in 0..ow {
                    o[y * ow + x] = (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * quarter;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward<T: Scalar>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = input_shape;
    let ow = s.w / 2;
    let quarter = T::lit(0.25);
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let d = dx.plane_mut(n, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    d[y * s.w + x] = g[(y / 2) * ow + x / 2] * quarter;
                }
            }
        }
    }
    dx
}

/// Replicate-padded neighbour indices (up, down, left, right) of `(y, x)`.
#[inline]
fn neighbours(y: usize, x: usize, h: usize, w: usize) -> [usize; 4] {
    let up = y.saturating_sub(1);
    let down = (y + 1).min(h - 1);
    let left = x.saturating_sub(1);
    let right = (x + 1).min(w - 1);
    [up * w + x, down * w + x, y * w + left, y * w + right]
}

/// Per-channel 5-point Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` with replicate
/// padding.
pub fn laplacian<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::shape("laplacian", format!("needs at least 2x2, got {s:?}")));
    }
    let four = T::lit(4.0);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let p = input.plane(n, c);
            let o = out.plane_mut(n, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    let i = y * s.w + x;
                    let nb = neighbours(y, x, s.h, s.w);
                    o[i] = p[nb[0]] + p[nb[1]] + p[nb[2]] + p[nb[3]] - four * p[i];
                }
            }
        }
    }
    Ok(out)
}

pub fn laplacian_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let s = grad_out.shape();
    let four = T::lit(4.0);
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let d = dx.plane_mut(n, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    let i = y * s.w + x;
                    let gi = g[i];
                    d[i] -= four * gi;
                    for j in neighbours(y, x, s.h, s.w) {
                        d[j] += gi;
                    }
                }
            }
        }
    }
    dx
}

fn box_taps(y: usize, x: usize, h: usize, w: usize) -> [usize; 9] {
    let ys = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
    let xs = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
    let mut taps = [0; 9];
    for (a, &yy) in ys.iter().enumerate() {
        for (b, &xx) in xs.iter().enumerate() {
            taps[a * 3 + b] = yy * w + xx;
        }
    }
    taps
}

/// Per-channel 3×3 mean filter with replicate padding.
pub fn box3<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let ninth = T::one() / T::lit(9.0);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let p = input.plane(n, c);
            let o = out.plane_mut(n, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    let acc: T = box_taps(y, x, s.h, s.w).iter().map(|&j| p[j]).sum();
                    o[y * s.w + x] = acc * ninth;
                }
            }
        }
    }
    out
}

pub fn box3_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let s = grad_out.shape();
    let ninth = T::one() / T::lit(9.0);
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let d = dx.plane_mut(n, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    let gi = g[y * s.w + x] * ninth;
                    for j in box_taps(y, x, s.h, s.w) {
                        d[j] += gi;
                    }
                }
            }
        }
    }
    dx
}
