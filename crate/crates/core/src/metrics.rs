//! Depth error metrics and temporal consistency along flow trajectories.
//!
//! Everything here is computed in `f64` regardless of the tensor precision.

use crate::error::{Error, Result};
use crate::kernels::bilinear_warp;
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TdtNormalization {
    /// Divide by the number of confident pixels.
    Confident,
    /// Divide by the number of pixels.
    AllPixels,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricConfig {
    pub cap_min: f64,
    pub cap_max: f64,
    pub tdt_epsilon: f64,
    pub tdt_threshold: f64,
    /// Intensities are multiplied by this before the confidence test.
    pub intensity_scale: f64,
    pub tdt_normalization: TdtNormalization,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            cap_min: 0.0,
            cap_max: 80.0,
            tdt_epsilon: 0.5,
            tdt_threshold: 0.05,
            intensity_scale: 255.0,
            tdt_normalization: TdtNormalization::Confident,
        }
    }
}

impl MetricConfig {
    pub fn cap_1_50() -> Self {
        MetricConfig {
            cap_min: 1.0,
            cap_max: 50.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cap_min >= 0.0 && self.cap_min < self.cap_max) {
            return Err(Error::Config(format!(
                "depth cap must satisfy 0 <= min < max, got ({}, {})",
                self.cap_min, self.cap_max
            )));
        }
        if !(self.tdt_threshold > 0.0 && self.tdt_threshold < 1.0) {
            return Err(Error::Config(format!(
                "TDT threshold must lie in (0, 1), got {}",
                self.tdt_threshold
            )));
        }
        if !(self.tdt_epsilon > 0.0) || !(self.intensity_scale > 0.0) {
            return Err(Error::Config("TDT epsilon and intensity scale must be positive".into()));
        }
        Ok(())
    }
}

fn check_same<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Median of `values`; the mean of the two central values for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Ratio `median(G) / median(D)` over pixels with `G > 0`.
pub fn median_ratio<T: Scalar>(depth: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    check_same("median_scale", depth, truth)?;
    let (mut d, mut g) = (Vec::new(), Vec::new());
    for (&p, &t) in depth.data().iter().zip(truth.data()) {
        let t = t.to_f64().unwrap_or(f64::NAN);
        if t > 0.0 {
            d.push(p.to_f64().unwrap_or(f64::NAN));
            g.push(t);
        }
    }
    let mg = median(&mut g).ok_or(Error::NoValidPixels("median_scale"))?;
    let md = median(&mut d).expect("same count as ground truth");
    if !(md > 0.0) || !md.is_finite() {
        return Err(Error::Numeric {
            op: "median_scale",
            detail: format!("median of predicted depth is {md}"),
        });
    }
    Ok(mg / md)
}

/// `D · median(G) / median(D)` over valid pixels.
pub fn median_scale<T: Scalar>(depth: &Tensor<T>, truth: &Tensor<T>) -> Result<Tensor<T>> {
    let k = T::lit(median_ratio(depth, truth)?);
    Ok(depth.map(|v| v * k))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta: [f64; 3],
    pub count: usize,
}

/// Standard error suite over pixels with `cap_min < G <= cap_max`, with `D`
/// clamped into the cap range.
pub fn depth_metrics<T: Scalar>(depth: &Tensor<T>, truth: &Tensor<T>, config: &MetricConfig) -> Result<DepthMetrics> {
    config.validate()?;
    check_same("depth_metrics", depth, truth)?;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    let mut n = 0usize;
    let lo = config.cap_min.max(f64::MIN_POSITIVE);
    for (&p, &t) in depth.data().iter().zip(truth.data()) {
        let g = t.to_f64().unwrap_or(f64::NAN);
        if !(g > config.cap_min && g <= config.cap_max) {
            continue;
        }
        let d = p.to_f64().unwrap_or(f64::NAN).clamp(lo, config.cap_max);
        let e = d - g;
        abs_rel += e.abs() / g;
        sq_rel += e * e / g;
        sq += e * e;
        sq_log += (d.ln() - g.ln()).powi(2);
        let ratio = (d / g).max(g / d);
        let mut thr = 1.0;
        for w in within.iter_mut() {
            thr *= 1.25;
            if ratio < thr {
                *w += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoValidPixels("depth_metrics"));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        delta: within.map(|w| w as f64 / nf),
        count: n,
    })
}

pub const TDT_THRESHOLDS: [f64; 3] = [1.0, 2.0, 3.0];

#[derive(Clone, Debug, PartialEq)]
pub struct TdtFrame {
    pub tdt: f64,
    /// Fraction of confident pixels whose change is below 1, 2 and 3.
    pub below: [f64; 3],
    pub confident: usize,
    /// `C · |D_t − D̄_t|` per pixel.
    pub map: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TdtResult {
    Valid(TdtFrame),
    NoValidTrajectory,
}

impl TdtResult {
    pub fn valid(&self) -> Option<&TdtFrame> {
        match self {
            TdtResult::Valid(f) => Some(f),
            TdtResult::NoValidTrajectory => None,
        }
    }
}

/// Binary trajectory confidence `exp(-ε |I_t − Ī_t|) > th`, with the L1
/// norm averaged over channels on the configured intensity scale.
pub fn trajectory_confidence<T: Scalar>(image: &Tensor<T>, warped_prev: &Tensor<T>, config: &MetricConfig) -> Result<Vec<bool>> {
    check_same("tdt", image, warped_prev)?;
    let s = image.shape();
    let plane = s.plane();
    let mut out = vec![false; s.n * plane];
    for n in 0..s.n {
        for p in 0..plane {
            let mut l1 = 0.0;
            for c in 0..s.c {
                let a = image.plane(n, c)[p].to_f64().unwrap_or(f64::NAN);
                let b = warped_prev.plane(n, c)[p].to_f64().unwrap_or(f64::NAN);
                l1 += (a - b).abs();
            }
            l1 *= config.intensity_scale / s.c as f64;
            out[n * plane + p] = (-config.tdt_epsilon * l1).exp() > config.tdt_threshold;
        }
    }
    Ok(out)
}

/// Temporal difference of `depth` against `prev_depth` carried along the
/// evaluation flow.
pub fn tdt<T: Scalar>(
    depth: &Tensor<T>,
    prev_depth: &Tensor<T>,
    flow: &Tensor<T>,
    image: &Tensor<T>,
    prev_image: &Tensor<T>,
    config: &MetricConfig,
) -> Result<TdtResult> {
    config.validate()?;
    check_same("tdt", depth, prev_depth)?;
    check_same("tdt", image, prev_image)?;
    let ds = depth.shape();
    if ds.c != 1 || image.shape().spatial() != ds.spatial() || image.shape().n != ds.n {
        return Err(Error::shape("tdt", format!("depth {ds:?} vs image {:?}", image.shape())));
    }
    let carried = bilinear_warp(prev_depth, flow)?;
    let warped_image = bilinear_warp(prev_image, flow)?;
    let conf = trajectory_confidence(image, &warped_image, config)?;

    let mut map = vec![0.0; depth.len()];
    let mut sum = 0.0;
    let mut confident = 0usize;
    let mut below = [0usize; 3];
    for (i, ((&d, &c), &ok)) in depth.data().iter().zip(carried.data()).zip(&conf).enumerate() {
        if !ok {
            continue;
        }
        let diff = (d.to_f64().unwrap_or(f64::NAN) - c.to_f64().unwrap_or(f64::NAN)).abs();
        map[i] = diff;
        sum += diff;
        confident += 1;
        for (b, &tau) in below.iter_mut().zip(&TDT_THRESHOLDS) {
            if diff < tau {
                *b += 1;
            }
        }
    }
    if confident == 0 {
        return Ok(TdtResult::NoValidTrajectory);
    }
    let denom = match config.tdt_normalization {
        TdtNormalization::Confident => confident,
        TdtNormalization::AllPixels => depth.len(),
    } as f64;
    Ok(TdtResult::Valid(TdtFrame {
        tdt: sum / denom,
        below: below.map(|b| b as f64 / confident as f64),
        confident,
        map,
    }))
}

/// Running means of per-frame metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub frames: usize,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta: [f64; 3],
    pub depth_pixels: usize,
    pub tdt_frames: usize,
    pub tdt: f64,
    pub tdt_below: [f64; 3],
    pub tdt_pixels: usize,
    /// Frames whose confidence mask was empty.
    pub tdt_skipped: usize,
}

fn running(mean: &mut f64, count: usize, v: f64) {
    *mean += (v - *mean) / count as f64;
}

impl MetricReport {
    pub fn add_depth(&mut self, m: &DepthMetrics) {
        self.frames += 1;
        let k = self.frames;
        running(&mut self.abs_rel, k, m.abs_rel);
        running(&mut self.sq_rel, k, m.sq_rel);
        running(&mut self.rmse, k, m.rmse);
        running(&mut self.rmse_log, k, m.rmse_log);
        for (a, &d) in self.delta.iter_mut().zip(&m.delta) {
            running(a, k, d);
        }
        self.depth_pixels += m.count;
    }

    pub fn add_tdt(&mut self, r: &TdtResult) {
        match r {
            TdtResult::NoValidTrajectory => self.tdt_skipped += 1,
            TdtResult::Valid(f) => {
                self.tdt_frames += 1;
                let k = self.tdt_frames;
                running(&mut self.tdt, k, f.tdt);
                for (a, &b) in self.tdt_below.iter_mut().zip(&f.below) {
                    running(a, k, b);
                }
                self.tdt_pixels += f.confident;
            }
        }
    }

    /// Frame-weighted merge of two reports.
    pub fn merge(&mut self, other: &MetricReport) {
        let mix = |a: &mut f64, na: usize, b: f64, nb: usize| {
            if na + nb > 0 {
                *a = (*a * na as f64 + b * nb as f64) / (na + nb) as f64;
            }
        };
        let (fa, fb) = (self.frames, other.frames);
        mix(&mut self.abs_rel, fa, other.abs_rel, fb);
        mix(&mut self.sq_rel, fa, other.sq_rel, fb);
        mix(&mut self.rmse, fa, other.rmse, fb);
        mix(&mut self.rmse_log, fa, other.rmse_log, fb);
        for i in 0..3 {
            mix(&mut self.delta[i], fa, other.delta[i], fb);
        }
        let (ta, tb) = (self.tdt_frames, other.tdt_frames);
        mix(&mut self.tdt, ta, other.tdt, tb);
        for i in 0..3 {
            mix(&mut self.tdt_below[i], ta, other.tdt_below[i], tb);
        }
        self.frames += fb;
        self.tdt_frames += tb;
        self.depth_pixels += other.depth_pixels;
        self.tdt_pixels += other.tdt_pixels;
        self.tdt_skipped += other.tdt_skipped;
    }

    /// `(key, value)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = |v: f64| format!("{v:.9}");
        vec![
            ("frames", self.frames.to_string()),
            ("abs_rel", f(self.abs_rel)),
            ("sq_rel", f(self.sq_rel)),
            ("rmse", f(self.rmse)),
            ("rmse_log", f(self.rmse_log)),
            ("delta1", f(self.delta[0])),
            ("delta2", f(self.delta[1])),
            ("delta3", f(self.delta[2])),
            ("depth_pixels", self.depth_pixels.to_string()),
            ("tdt_frames", self.tdt_frames.to_string()),
            ("tdt", f(self.tdt)),
            ("tdt_lt1", f(self.tdt_below[0])),
            ("tdt_lt2", f(self.tdt_below[1])),
            ("tdt_lt3", f(self.tdt_below[2])),
            ("tdt_pixels", self.tdt_pixels.to_string()),
            ("tdt_skipped", self.tdt_skipped.to_string()),
        ]
    }
}

/// How predictions are rescaled before evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scaling {
    None,
    /// One `median(G) / median(D)` factor over all frames of a sequence.
    PerSequence,
}

fn stack<T: Scalar>(frames: &[Tensor<T>]) -> Result<Tensor<T>> {
    let s = frames[0].shape();
    let mut data = Vec::with_capacity(s.numel() * frames.len());
    for f in frames {
        check_same("evaluate_sequence", &frames[0], f)?;
        data.extend_from_slice(f.data());
    }
    Tensor::from_vec(Shape::new(s.n * frames.len(), s.c, s.h, s.w), data)
}

/// Depth metrics on every frame and TDT on every frame after the first.
/// `flows[t]` maps frame `t` to `t - 1`; `flows[0]` is ignored.
pub fn evaluate_sequence<T: Scalar>(
    depths: &[Tensor<T>],
    truths: &[Tensor<T>],
    images: &[Tensor<T>],
    flows: &[Tensor<T>],
    scaling: Scaling,
    config: &MetricConfig,
) -> Result<MetricReport> {
    let n = depths.len();
    if n == 0 || truths.len() != n || images.len() != n || flows.len() != n {
        return Err(Error::Config(format!(
            "sequence of {n} predictions, {} depth maps, {} frames and {} flows",
            truths.len(),
            images.len(),
            flows.len()
        )));
    }
    let scaled: Vec<Tensor<T>> = match scaling {
        Scaling::None => depths.to_vec(),
        Scaling::PerSequence => {
            let k = T::lit(median_ratio(&stack(depths)?, &stack(truths)?)?);
            depths.iter().map(|d| d.map(|v| v * k)).collect()
        }
    };
    let mut report = MetricReport::default();
    for t in 0..n {
        report.add_depth(&depth_metrics(&scaled[t], &truths[t], config)?);
        if t > 0 {
            report.add_tdt(&tdt(&scaled[t], &scaled[t - 1], &flows[t], &images[t], &images[t - 1], config)?);
        }
    }
    Ok(report)
}
