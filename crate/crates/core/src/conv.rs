//! Convolution kernels (im2col + GEMM) and their adjoints.
//!
//! Weight layout for `conv2d` is `(out_ch, in_ch, k, k)`. A transposed
//! convolution is the exact adjoint of the `conv2d` that shares its weight,
//! so its weight layout is `(in_ch, out_ch, k, k)` from the transposed
//! layer's point of view.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Odd kernel with "same" padding `dilation * (k - 1) / 2`; stride-2
    /// layers then halve the resolution, rounding up.
    pub fn new(
        kernel: usize,
        stride: usize,
        dilation: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {kernel} must be odd")));
        }
        Self::with_padding(
            kernel,
            stride,
            dilation,
            in_channels,
            out_channels,
            dilation * (kernel - 1) / 2,
        )
    }

    pub fn with_padding(
        kernel: usize,
        stride: usize,
        dilation: usize,
        in_channels: usize,
        out_channels: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || dilation == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!(
                "conv parameters must be positive: k={kernel} s={stride} d={dilation} in={in_channels} out={out_channels}"
            )));
        }
        Ok(ConvSpec {
            kernel,
            stride,
            dilation,
            in_channels,
            out_channels,
            padding,
        })
    }

    fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// `floor((n + 2p - d(k-1) - 1) / s) + 1`, or `None` if the kernel does
    /// not fit the padded input.
    pub fn output_len(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        if padded < self.span() {
            return None;
        }
        Some((padded - self.span()) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    pub fn transpose_weight_shape(&self) -> Shape {
        Shape::new(self.in_channels, self.out_channels, self.kernel, self.kernel)
    }

    fn conv_output(&self, input: Shape) -> Result<(usize, usize)> {
        match (self.output_len(input.h), self.output_len(input.w)) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::shape(
                "conv2d",
                format!("kernel span {} does not fit input {input:?}", self.span()),
            )),
        }
    }
}

/// Geometry shared by im2col / col2im: a `(c, h, w)` image sampled by a
/// kernel onto an `(oh, ow)` grid.
#[derive(Clone, Copy)]
struct Patch {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl Patch {
    fn rows(&self) -> usize {
        self.c * self.spec.kernel * self.spec.kernel
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Range of output columns whose tap `koff` lands inside `[0, len)`.
    fn valid_range(&self, koff: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.spec.stride as isize;
        let off = (koff * self.spec.dilation) as isize - self.spec.padding as isize;
        // index = o * s + off must satisfy 0 <= index < len
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = if (len as isize) - off <= 0 {
            0
        } else {
            ((len as isize - off - 1) / s + 1).min(out_len as isize)
        };
        (lo.max(0) as usize, hi.max(lo) as usize)
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let k = self.spec.kernel;
        let (s, d, p) = (self.spec.stride, self.spec.dilation, self.spec.padding);
        let ncol = self.cols();
        cols.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..self.c {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                let (oy0, oy1) = self.valid_range(ky, self.h, self.oh);
                for kx in 0..k {
                    let (ox0, ox1) = self.valid_range(kx, self.w, self.ow);
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky * d - p;
                        let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if ox1 <= ox0 {
                            continue;
                        }
                        let ix0 = ox0 * s + kx * d - p;
                        if s == 1 {
                            out_row[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for (j, o) in out_row[ox0..ox1].iter_mut().enumerate() {
                                *o = src_row[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let k = self.spec.kernel;
        let (s, d, p) = (self.spec.stride, self.spec.dilation, self.spec.padding);
        let ncol = self.cols();
        for c in 0..self.c {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                let (oy0, oy1) = self.valid_range(ky, self.h, self.oh);
                for kx in 0..k {
                    let (ox0, ox1) = self.valid_range(kx, self.w, self.ow);
                    if ox1 <= ox0 {
                        continue;
                    }
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky * d - p;
                        let dst_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let col_row = &src[oy * self.ow + ox0..oy * self.ow + ox1];
                        let ix0 = ox0 * s + kx * d - p;
                        if s == 1 {
                            for (o, &v) in dst_row[ix0..ix0 + col_row.len()].iter_mut().zip(col_row) {
                                *o += v;
                            }
                        } else {
                            for (j, &v) in col_row.iter().enumerate() {
                                dst_row[ix0 + j * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_weight<T: Scalar>(
    op: &'static str,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    expect: Shape,
    bias_len: usize,
) -> Result<()> {
    if weight.shape() != expect {
        return Err(Error::shape(
            op,
            format!("weight {:?}, expected {expect:?}", weight.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.len() != bias_len {
            return Err(Error::shape(
                op,
                format!("bias has {} values, expected {bias_len}", b.len()),
            ));
        }
    }
    Ok(())
}

fn add_bias<T: Scalar>(out: &mut Tensor<T>, bias: Option<&Tensor<T>>) {
    if let Some(b) = bias {
        let s = out.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                let v = b.data()[c];
                out.plane_mut(n, c).iter_mut().for_each(|o| *o += v);
            }
        }
    }
}

fn bias_grad<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let s = grad_out.shape();
    let mut db = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, acc) in db.iter_mut().enumerate() {
            *acc += grad_out.plane(n, c).iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(Shape::new(s.c, 1, 1, 1), db).expect("bias gradient shape")
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.c != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, layer expects {}", s.c, spec.in_channels),
        ));
    }
    check_weight("conv2d", weight, bias, spec.weight_shape(), spec.out_channels)?;
    let (oh, ow) = spec.conv_output(s)?;
    let patch = Patch { c: s.c, h: s.h, w: s.w, oh, ow, spec: *spec };
    let (rows, ncol) = (patch.rows(), patch.cols());
    let mut out = Tensor::zeros(Shape::new(s.n, spec.out_channels, oh, ow));
    let mut cols = vec![T::zero(); rows * ncol];
    let in_block = s.c * s.plane();
    let out_block = spec.out_channels * ncol;
    for n in 0..s.n {
        patch.im2col(&input.data()[n * in_block..(n + 1) * in_block], &mut cols);
        T::gemm(
            spec.out_channels,
            rows,
            ncol,
            T::one(),
            (weight.data(), rows as isize, 1),
            (&cols, ncol as isize, 1),
            T::zero(),
            &mut out.data_mut()[n * out_block..(n + 1) * out_block],
        );
    }
    add_bias(&mut out, bias);
    out.ensure_finite("conv2d")
}

/// Gradients of `conv2d` w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = input.shape();
    let go = grad_out.shape();
    let patch = Patch { c: s.c, h: s.h, w: s.w, oh: go.h, ow: go.w, spec: *spec };
    let (rows, ncol) = (patch.rows(), patch.cols());
    let mut cols = vec![T::zero(); rows * ncol];
    let mut dcols = vec![T::zero(); rows * ncol];
    let mut dx = Tensor::zeros(s);
    let mut dw = Tensor::zeros(weight.shape());
    let in_block = s.c * s.plane();
    let out_block = go.c * ncol;
    for n in 0..s.n {
        let g = &grad_out.data()[n * out_block..(n + 1) * out_block];
        patch.im2col(&input.data()[n * in_block..(n + 1) * in_block], &mut cols);
        // dW += gout · colsᵀ
        T::gemm(
            go.c,
            ncol,
            rows,
            T::one(),
            (g, ncol as isize, 1),
            (&cols, 1, ncol as isize),
            T::one(),
            dw.data_mut(),
        );
        // dcols = Wᵀ · gout
        T::gemm(
            rows,
            go.c,
            ncol,
            T::one(),
            (weight.data(), 1, rows as isize),
            (g, ncol as isize, 1),
            T::zero(),
            &mut dcols,
        );
        patch.col2im_add(&dcols, &mut dx.data_mut()[n * in_block..(n + 1) * in_block]);
    }
    (dx, dw, bias_grad(grad_out))
}

/// Output size of the transposed convolution: exactly `stride × input`.
fn transpose_output(spec: &ConvSpec, input: Shape) -> Result<(usize, usize)> {
    let (oh, ow) = (input.h * spec.stride, input.w * spec.stride);
    if spec.output_len(oh) != Some(input.h) || spec.output_len(ow) != Some(input.w) {
        return Err(Error::shape(
            "conv2d_transpose",
            format!(
                "k={} s={} p={} cannot map {input:?} to {oh}x{ow}",
                spec.kernel, spec.stride, spec.padding
            ),
        ));
    }
    Ok((oh, ow))
}

pub fn conv2d_transpose<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.c != spec.in_channels {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("input has {} channels, layer expects {}", s.c, spec.in_channels),
        ));
    }
    check_weight(
        "conv2d_transpose",
        weight,
        bias,
        spec.transpose_weight_shape(),
        spec.out_channels,
    )?;
    let (oh, ow) = transpose_output(spec, s)?;
    // The adjoint conv maps out_channels -> in_channels on the (oh, ow) grid.
    let patch = Patch { c: spec.out_channels, h: oh, w: ow, oh: s.h, ow: s.w, spec: *spec };
    let (rows, ncol) = (patch.rows(), patch.cols());
    let mut cols = vec![T::zero(); rows * ncol];
    let mut out = Tensor::zeros(Shape::new(s.n, spec.out_channels, oh, ow));
    let in_block = s.c * s.plane();
    let out_block = spec.out_channels * oh * ow;
    for n in 0..s.n {
        T::gemm(
            rows,
            s.c,
            ncol,
            T::one(),
            (weight.data(), 1, rows as isize),
            (&input.data()[n * in_block..(n + 1) * in_block], ncol as isize, 1),
            T::zero(),
            &mut cols,
        );
        patch.col2im_add(&cols, &mut out.data_mut()[n * out_block..(n + 1) * out_block]);
    }
    add_bias(&mut out, bias);
    out.ensure_finite("conv2d_transpose")
}

pub fn conv2d_transpose_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = input.shape();
    let go = grad_out.shape();
    let patch = Patch { c: go.c, h: go.h, w: go.w, oh: s.h, ow: s.w, spec: *spec };
    let (rows, ncol) = (patch.rows(), patch.cols());
    let mut gcols = vec![T::zero(); rows * ncol];
    let mut dx = Tensor::zeros(s);
    let mut dw = Tensor::zeros(weight.shape());
    let in_block = s.c * s.plane();
    let out_block = go.c * go.plane();
    for n in 0..s.n {
        patch.im2col(&grad_out.data()[n * out_block..(n + 1) * out_block], &mut gcols);
        let x = &input.data()[n * in_block..(n + 1) * in_block];
        // dx = W · im2col(gout)
        T::gemm(
            s.c,
            rows,
            ncol,
            T::one(),
            (weight.data(), rows as isize, 1),
            (&gcols, ncol as isize, 1),
            T::zero(),
            &mut dx.data_mut()[n * in_block..(n + 1) * in_block],
        );
        // dW += x · im2col(gout)ᵀ
        T::gemm(
            s.c,
            ncol,
            rows,
            T::one(),
            (x, ncol as isize, 1),
            (&gcols, 1, ncol as isize),
            T::one(),
            dw.data_mut(),
        );
    }
    (dx, dw, bias_grad(grad_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct summation over the receptive field.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
        let s = x.shape();
        let oh = spec.output_len(s.h).unwrap();
        let ow = spec.output_len(s.w).unwrap();
        Tensor::from_fn(Shape::new(s.n, spec.out_channels, oh, ow), |n, o, oy, ox| {
            let mut acc = 0.0;
            for c in 0..s.c {
                for ky in 0..spec.kernel {
                    for kx in 0..spec.kernel {
                        let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                            acc += x.at(n, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_is_exact() {
        let spec = ConvSpec::new(1, 1, 1, 1, 1).unwrap();
        let x = Tensor::<f32>::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, x| (y * 4 + x) as f32 * 0.37);
        let w = Tensor::ones(Shape::new(1, 1, 1, 1));
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert_eq!(conv2d(&x, &w, Some(&b), &spec).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_receptive_field() {
        let spec = ConvSpec::new(3, 1, 1, 1, 1).unwrap();
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 4, 4));
        let w = Tensor::ones(Shape::new(1, 1, 3, 3));
        let out = conv2d(&x, &w, None, &spec).unwrap();
        let expect = [4., 6., 6., 4., 6., 9., 9., 6., 6., 9., 9., 6., 4., 6., 6., 4.];
        assert_eq!(out.data(), &expect);
    }

    #[test]
    fn dilated_same_padding_keeps_resolution() {
        let spec = ConvSpec::new(3, 1, 4, 2, 3).unwrap();
        let x = Tensor::<f32>::ones(Shape::new(1, 2, 16, 48));
        let w = Tensor::ones(spec.weight_shape());
        let out = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 3, 16, 48));
    }

    #[test]
    fn stride_two_halves_rounding_up() {
        let spec = ConvSpec::new(3, 2, 1, 1, 1).unwrap();
        assert_eq!(spec.output_len(64), Some(32));
        assert_eq!(spec.output_len(7), Some(4));
    }

    #[test]
    fn matches_naive_on_random_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, d) in &[(3, 1, 1), (3, 2, 1), (3, 1, 2), (5, 1, 1), (5, 2, 1), (1, 1, 1)] {
            let spec = ConvSpec::new(k, s, d, 3, 2).unwrap();
            let x = Tensor::<f64>::uniform(Shape::new(2, 3, 7, 9), -1.0, 1.0, &mut rng);
            let w = Tensor::<f64>::uniform(spec.weight_shape(), -1.0, 1.0, &mut rng);
            let fast = conv2d(&x, &w, None, &spec).unwrap();
            let slow = naive_conv(&x, &w, &spec);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} d={d}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn transpose_scatters_single_input() {
        let spec = ConvSpec::with_padding(2, 2, 1, 1, 1, 0).unwrap();
        let x = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 3.0);
        let w = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = conv2d_transpose(&x, &w, None, &spec).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(out.data(), &[3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn transpose_of_zero_is_zero_at_double_size() {
        let spec = ConvSpec::new(5, 2, 1, 4, 2).unwrap();
        let x = Tensor::<f32>::zeros(Shape::new(1, 4, 3, 5));
        let w = Tensor::ones(spec.transpose_weight_shape());
        let b = Tensor::zeros(Shape::new(2, 1, 1, 1));
        let out = conv2d_transpose(&x, &w, Some(&b), &spec).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 2, 6, 10));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let spec = ConvSpec::new(3, 1, 1, 2, 1).unwrap();
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::zeros(spec.weight_shape());
        assert!(matches!(conv2d(&x, &w, None, &spec), Err(Error::Shape { .. })));
    }
}
