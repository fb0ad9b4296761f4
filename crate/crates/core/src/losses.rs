//! Training objectives.
//!
//! ```text
//! L = L_si + λ_D·L_ds + λ·Σ_i (L_ph,i + λ_O·L_os,i)
//! ```
//!
//! averaged over the frames of a window; the flow terms are skipped at a
//! window's first frame.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::image::{self, eval};
use crate::network::{FrameInput, StepOutput};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_d: f64,
    pub lambda_o: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            beta: 0.85,
            gamma: 10.0,
            lambda_d: 0.1,
            lambda_o: 0.1,
            lambda: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.alpha) || !unit(self.beta) {
            return Err(Error::Config(format!(
                "alpha and beta must lie in [0, 1], got {} and {}",
                self.alpha, self.beta
            )));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda_d", self.lambda_d),
            ("lambda_o", self.lambda_o),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// `(1/N) Σ s² − (α/N²)(Σ s)²` with `s = log D − log G` over pixels where
/// `G > 0`.
pub fn scale_invariant_loss<T: Scalar>(depth: &Var<T>, truth: &Tensor<T>, alpha: f64) -> Result<Var<T>> {
    if depth.shape() != truth.shape() {
        return Err(Error::shape(
            "scale_invariant_loss",
            format!("{:?} vs {:?}", depth.shape(), truth.shape()),
        ));
    }
    let mut valid = 0usize;
    for (&d, &g) in depth.value().data().iter().zip(truth.data()) {
        if g > T::zero() {
            valid += 1;
            if !(d > T::zero()) {
                return Err(Error::Numeric {
                    op: "scale_invariant_loss",
                    detail: format!("non-positive predicted depth {d} at a valid pixel"),
                });
            }
        }
    }
    if valid == 0 {
        return Err(Error::NoValidPixels("scale_invariant_loss"));
    }
    let mask = truth.map(|g| if g > T::zero() { T::one() } else { T::zero() });
    let log_truth = truth.map(|g| if g > T::zero() { g.ln() } else { T::zero() });
    let mask_var = Var::constant(mask.clone());
    // Invalid pixels are replaced by 1 before the log so they contribute 0.
    let safe = depth
        .mul(&mask_var)?
        .add(&Var::constant(mask.map(|m| T::one() - m)))?;
    let s = safe.log()?.sub(&Var::constant(log_truth))?.mul(&mask_var)?;
    let n = valid as f64;
    let mean_sq = s.square()?.sum()?.scale(T::lit(1.0 / n))?;
    let pair = s.sum()?.square()?.scale(T::lit(alpha / (n * n)))?;
    mean_sq.sub(&pair)
}

/// `exp(-γ · mean_c |∇² I|)`, one channel.
pub fn edge_weights<T: Scalar>(image: &Tensor<T>, gamma: f64) -> Result<Tensor<T>> {
    let lap = eval::laplacian(image)?;
    let s = lap.shape();
    let inv_c = T::lit(1.0 / s.c as f64);
    let g = T::lit(-gamma);
    Ok(Tensor::from_fn(s.with_channels(1), |n, _, y, x| {
        let mut acc = T::zero();
        for c in 0..s.c {
            acc += lap.at(n, c, y, x).abs();
        }
        (g * acc * inv_c).exp()
    }))
}

fn weighted_smoothness<T: Scalar>(field: &Var<T>, image: &Tensor<T>, gamma: f64, op: &'static str) -> Result<Var<T>> {
    let (fs, is) = (field.shape(), image.shape());
    if fs.h != is.h || fs.w != is.w || fs.n != is.n {
        return Err(Error::shape(op, format!("{fs:?} vs image {is:?}")));
    }
    let w = Var::constant(edge_weights(image, gamma)?);
    image::laplacian(field)?.abs()?.mul(&w)?.mean()
}

/// Mean of `|∇² D| · exp(-γ |∇² I|)`.
pub fn depth_smoothness_loss<T: Scalar>(depth: &Var<T>, image: &Tensor<T>, gamma: f64) -> Result<Var<T>> {
    weighted_smoothness(depth, image, gamma, "depth_smoothness_loss")
}

/// Same form as the depth smoothness term, averaged over both flow
/// channels.
pub fn flow_smoothness_loss<T: Scalar>(flow: &Var<T>, image: &Tensor<T>, gamma: f64) -> Result<Var<T>> {
    weighted_smoothness(flow, image, gamma, "flow_smoothness_loss")
}

/// Mean of `β(1 − SSIM)/2 + (1 − β)|I − Ī|`.
pub fn photometric_loss<T: Scalar>(image: &Tensor<T>, warped: &Var<T>, beta: f64) -> Result<Var<T>> {
    if image.shape() != warped.shape() {
        return Err(Error::shape(
            "photometric_loss",
            format!("{:?} vs {:?}", image.shape(), warped.shape()),
        ));
    }
    let target = Var::constant(image.clone());
    let structural = image::ssim(&target, warped)?
        .affine(T::lit(-0.5), T::lit(0.5))?
        .mean()?;
    let l1 = target.sub(warped)?.abs()?.mean()?;
    structural.scale(T::lit(beta))?.add(&l1.scale(T::lit(1.0 - beta))?)
}

pub const TERM_NAMES: [&str; 8] = ["si", "ds", "ph1", "ph2", "ph3", "os1", "os2", "os3"];

/// The window loss and the value of each term, averaged over the frames in
/// which it appears.
#[derive(Clone, Debug)]
pub struct LossBreakdown<T: Scalar> {
    pub total: Var<T>,
    pub terms: Vec<(&'static str, f64)>,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        self.terms
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|&(n, _)| n)
            .or_else(|| (!self.total.item().is_finite()).then_some("total"))
    }
}

/// Window loss for `outputs[t]` predicted from `frames[t]` with ground
/// truth `depths[t]`.
pub fn total_loss<T: Scalar>(
    outputs: &[StepOutput<T>],
    frames: &[FrameInput<'_, T>],
    depths: &[&Tensor<T>],
    config: &LossConfig,
) -> Result<LossBreakdown<T>> {
    config.validate()?;
    if outputs.is_empty() || outputs.len() != frames.len() || frames.len() != depths.len() {
        return Err(Error::Config(format!(
            "window of {} outputs, {} frames and {} depth maps",
            outputs.len(),
            frames.len(),
            depths.len()
        )));
    }
    let mut sums = [0.0f64; TERM_NAMES.len()];
    let mut counts = [0usize; TERM_NAMES.len()];
    let mut acc = |i: usize, v: &Var<T>| {
        sums[i] += v.item().to_f64().unwrap_or(f64::NAN);
        counts[i] += 1;
    };
    let mut total: Option<Var<T>> = None;
    for ((out, frame), truth) in outputs.iter().zip(frames).zip(depths) {
        let si = scale_invariant_loss(&out.depth, truth, config.alpha)?;
        let ds = depth_smoothness_loss(&out.depth, frame.image, config.gamma)?;
        acc(0, &si);
        acc(1, &ds);
        let mut frame_loss = si.add(&ds.scale(T::lit(config.lambda_d))?)?;
        if let Some(prev) = frame.prev_image {
            let mut cur = frame.image.clone();
            let mut prev = prev.clone();
            for (i, flow) in out.flows.iter().enumerate() {
                if i > 0 {
                    cur = eval::downsample2x(&cur, false)?;
                    prev = eval::downsample2x(&prev, false)?;
                }
                let warped = Var::constant(prev.clone()).warp(flow)?;
                let ph = photometric_loss(&cur, &warped, config.beta)?;
                let os = flow_smoothness_loss(flow, &cur, config.gamma)?;
                acc(2 + i, &ph);
                acc(5 + i, &os);
                let scale_term = ph.add(&os.scale(T::lit(config.lambda_o))?)?;
                frame_loss = frame_loss.add(&scale_term.scale(T::lit(config.lambda))?)?;
            }
        }
        total = Some(match total {
            None => frame_loss,
            Some(t) => t.add(&frame_loss)?,
        });
    }
    let total = total
        .expect("window is non-empty")
        .scale(T::lit(1.0 / outputs.len() as f64))?;
    let terms = TERM_NAMES
        .iter()
        .zip(sums.iter().zip(counts))
        .filter(|(_, (_, c))| *c > 0)
        .map(|(&n, (&s, c))| (n, s / c as f64))
        .collect();
    Ok(LossBreakdown { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn var(t: Tensor<f64>) -> Var<f64> {
        Var::constant(t)
    }

    #[test]
    fn si_closed_form() {
        let g = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 3.0, 0.0]).unwrap();
        let d = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![2.0, 6.0, -5.0]).unwrap();
        let l = scale_invariant_loss(&var(d), &g, 0.5).unwrap().item();
        let l2 = 2f64.ln().powi(2);
        assert!((l - 0.5 * l2).abs() < 1e-15);
        assert!((l - 0.24023).abs() < 1e-5);
        let exact = scale_invariant_loss(&var(g.clone()), &g, 0.5).unwrap().item();
        assert_eq!(exact, 0.0);
    }

    #[test]
    fn si_errors() {
        let g = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        assert!(matches!(
            scale_invariant_loss(&var(Tensor::ones(g.shape())), &g, 0.5),
            Err(Error::NoValidPixels(_))
        ));
        let g = Tensor::<f64>::ones(Shape::new(1, 1, 2, 2));
        assert!(matches!(
            scale_invariant_loss(&var(Tensor::zeros(g.shape())), &g, 0.5),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn smoothness_stencil_arithmetic() {
        let img = Tensor::<f64>::full(Shape::new(1, 3, 5, 5), 0.4);
        let mut d = Tensor::<f64>::ones(Shape::new(1, 1, 5, 5));
        assert_eq!(depth_smoothness_loss(&var(d.clone()), &img, 10.0).unwrap().item(), 0.0);
        d.set(0, 0, 2, 2, 2.0);
        let l = depth_smoothness_loss(&var(d), &img, 10.0).unwrap().item();
        assert!((l - 8.0 / 25.0).abs() < 1e-15);
    }

    #[test]
    fn smoothness_decreases_with_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::<f64>::uniform(Shape::new(1, 3, 6, 6), 0.0, 1.0, &mut rng);
        let d = var(Tensor::uniform(Shape::new(1, 1, 6, 6), 1.0, 5.0, &mut rng));
        let mut last = f64::INFINITY;
        for gamma in [0.0, 1.0, 5.0, 10.0, 50.0] {
            let l = depth_smoothness_loss(&d, &img, gamma).unwrap().item();
            assert!(l <= last);
            last = l;
        }
    }

    #[test]
    fn flow_smoothness_is_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::<f64>::uniform(Shape::new(1, 3, 6, 6), 0.0, 1.0, &mut rng);
        let f = Tensor::uniform(Shape::new(1, 2, 6, 6), -2.0, 2.0, &mut rng);
        let a = flow_smoothness_loss(&var(f.clone()), &img, 10.0).unwrap().item();
        let b = flow_smoothness_loss(&var(f.map(|v| 2.0 * v)), &img, 10.0).unwrap().item();
        assert!((b - 2.0 * a).abs() < 1e-12 * b);
        let c = Tensor::from_fn(Shape::new(1, 2, 6, 6), |_, c, _, _| if c == 0 { 1.5 } else { -0.5 });
        assert_eq!(flow_smoothness_loss(&var(c), &img, 10.0).unwrap().item(), 0.0);
    }

    #[test]
    fn photometric_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::<f64>::uniform(Shape::new(1, 3, 6, 6), 0.0, 0.8, &mut rng);
        assert!(photometric_loss(&img, &var(img.clone()), 0.85).unwrap().item().abs() < 1e-6);
        let shifted = img.map(|v| v + 0.15);
        let l1 = photometric_loss(&img, &var(shifted), 0.0).unwrap().item();
        assert!((l1 - 0.15).abs() < 1e-12);
        let other = Tensor::<f64>::uniform(Shape::new(1, 3, 6, 6), 0.0, 1.0, &mut rng);
        let l = photometric_loss(&img, &var(other), 0.85).unwrap().item();
        assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda: -0.1, ..Default::default() }.validate().is_err());
    }
}
