//! Image-domain primitives used by the memory cell, the losses and the
//! metrics. Each has a differentiable form on [`Var`] and a plain form on
//! [`Tensor`].

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use crate::kernels::bilinear_warp;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Per-pixel mean over channels of `|a - b|`.
pub fn mean_abs_diff<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    a.sub(b)?.abs()?.channel_mean()
}

/// `exp(-epsilon * mean_c |cur - warped_prev|)`, a single-channel map in (0, 1].
pub fn matching_confidence<T: Scalar>(cur: &Var<T>, warped_prev: &Var<T>, epsilon: f64) -> Result<Var<T>> {
    if cur.shape() != warped_prev.shape() {
        return Err(Error::shape(
            "matching_confidence",
            format!("{:?} vs {:?}", cur.shape(), warped_prev.shape()),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("confidence bandwidth must be positive, got {epsilon}")));
    }
    mean_abs_diff(cur, warped_prev)?.scale(T::lit(-epsilon))?.exp()
}

/// 2×2 average pooling; flow fields are also rescaled by 0.5 so that
/// displacements stay in pixels of the coarser grid.
pub fn downsample2x<T: Scalar>(input: &Var<T>, is_flow: bool) -> Result<Var<T>> {
    let pooled = input.avg_pool2()?;
    if is_flow {
        pooled.scale(T::lit(0.5))
    } else {
        Ok(pooled)
    }
}

pub fn laplacian<T: Scalar>(input: &Var<T>) -> Result<Var<T>> {
    input.laplacian()
}

/// Per-pixel, per-channel SSIM with a 3×3 mean window (replicate padded).
pub fn ssim<T: Scalar>(x: &Var<T>, y: &Var<T>) -> Result<Var<T>> {
    if x.shape() != y.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let two = T::lit(2.0);
    let mu_x = x.box3()?;
    let mu_y = y.box3()?;
    let mu_xx = mu_x.square()?;
    let mu_yy = mu_y.square()?;
    let mu_xy = mu_x.mul(&mu_y)?;
    let var_x = x.square()?.box3()?.sub(&mu_xx)?;
    let var_y = y.square()?.box3()?.sub(&mu_yy)?;
    let cov = x.mul(y)?.box3()?.sub(&mu_xy)?;
    let num = mu_xy
        .affine(two, c1)?
        .mul(&cov.affine(two, c2)?)?;
    let den = mu_xx
        .add(&mu_yy)?
        .affine(T::one(), c1)?
        .mul(&var_x.add(&var_y)?.affine(T::one(), c2)?)?;
    num.div(&den)
}

/// Plain-tensor forms.
pub mod eval {
    use super::*;

    fn run<T: Scalar>(f: impl FnOnce() -> Result<Var<T>>) -> Result<Tensor<T>> {
        Ok(f()?.value().clone())
    }

    pub fn matching_confidence<T: Scalar>(cur: &Tensor<T>, warped_prev: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
        run(|| {
            super::matching_confidence(
                &Var::constant(cur.clone()),
                &Var::constant(warped_prev.clone()),
                epsilon,
            )
        })
    }

    pub fn downsample2x<T: Scalar>(input: &Tensor<T>, is_flow: bool) -> Result<Tensor<T>> {
        run(|| super::downsample2x(&Var::constant(input.clone()), is_flow))
    }

    pub fn laplacian<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
        crate::kernels::laplacian(input)
    }

    pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        run(|| super::ssim(&Var::constant(x.clone()), &Var::constant(y.clone())))
    }
}
