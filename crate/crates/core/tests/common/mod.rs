//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use flowdepth::metrics::MetricConfig;
use flowdepth::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Values `k / 64` for integer `k`, so sums and differences stay exact.
pub fn dyadic(rng: &mut ChaCha8Rng, shape: Shape, max: i32) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-max..=max) as f64 / 64.0)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        (1.0 - t) * a + t * b
    }
}

/// Bilinear sample of a single-channel `w × h` plane at `(x, y)`, clamped
/// to the border.
pub fn sample(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let axis = |c: f64, len: usize| -> (usize, usize, f64) {
        if len == 1 {
            return (0, 0, 0.0);
        }
        let c = c.clamp(0.0, (len - 1) as f64);
        let i0 = (c.floor() as usize).min(len - 2);
        (i0, i0 + 1, c - i0 as f64)
    };
    let (x0, x1, fx) = axis(x, w);
    let (y0, y1, fy) = axis(y, h);
    let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], fx);
    let bot = lerp(plane[y1 * w + x0], plane[y1 * w + x1], fx);
    lerp(top, bot, fy)
}

/// Per-pixel loop for TDT: `(tdt, fractions below 1/2/3, confident count)`,
/// or `None` when no pixel is confident. Normalised by the confident count.
pub fn tdt_oracle(
    depth: &Tensor<f64>,
    prev_depth: &Tensor<f64>,
    flow: &Tensor<f64>,
    image: &Tensor<f64>,
    prev_image: &Tensor<f64>,
    cfg: &MetricConfig,
) -> Option<(f64, [f64; 3], usize)> {
    let s = depth.shape();
    let (w, h) = (s.w, s.h);
    let channels = image.shape().c;
    let (mut sum, mut count, mut below) = (0.0, 0usize, [0usize; 3]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + flow.plane(0, 0)[i];
            let sy = y as f64 + flow.plane(0, 1)[i];
            let mut l1 = 0.0;
            for c in 0..channels {
                let warped = sample(prev_image.plane(0, c), w, h, sx, sy);
                l1 += (image.plane(0, c)[i] - warped).abs();
            }
            l1 *= cfg.intensity_scale / channels as f64;
            if (-cfg.tdt_epsilon * l1).exp() <= cfg.tdt_threshold {
                continue;
            }
            let diff = (depth.data()[i] - sample(prev_depth.data(), w, h, sx, sy)).abs();
            sum += diff;
            count += 1;
            for (k, tau) in [1.0, 2.0, 3.0].into_iter().enumerate() {
                if diff < tau {
                    below[k] += 1;
                }
            }
        }
    }
    (count > 0).then(|| (sum / count as f64, below.map(|b| b as f64 / count as f64), count))
}

/// Random 5×5-style TDT instance in which a share of pixels follow the flow
/// photometrically, so the confidence mask is neither empty nor full.
pub fn tdt_instance(seed: u64, h: usize, w: usize) -> [Tensor<f64>; 5] {
    let mut r = rng(seed);
    let prev_image = uniform(&mut r, Shape::new(1, 3, h, w), 0.0, 1.0);
    let flow = uniform(&mut r, Shape::new(1, 2, h, w), -1.5, 1.5);
    let warped = flowdepth::image::bilinear_warp(&prev_image, &flow).unwrap();
    let mut image = warped.clone();
    for i in 0..h * w {
        if r.gen_bool(0.4) {
            for c in 0..3 {
                image.plane_mut(0, c)[i] = r.gen_range(0.0..1.0);
            }
        } else {
            for c in 0..3 {
                image.plane_mut(0, c)[i] += r.gen_range(-0.01..0.01);
            }
        }
    }
    let depth = uniform(&mut r, Shape::new(1, 1, h, w), 1.0, 10.0);
    let prev_depth = uniform(&mut r, Shape::new(1, 1, h, w), 1.0, 10.0);
    [depth, prev_depth, flow, image, prev_image]
}

/// `(1/N) Σ s² − (α/N²) Σ_p Σ_q s_p s_q` with `s = ln D − ln G`.
pub fn si_double_sum(depth: &[f64], truth: &[f64], alpha: f64) -> f64 {
    let s: Vec<f64> = depth.iter().zip(truth).map(|(d, g)| d.ln() - g.ln()).collect();
    let n = s.len() as f64;
    let mut pair = 0.0;
    for p in &s {
        for q in &s {
            pair += p * q;
        }
    }
    s.iter().map(|v| v * v).sum::<f64>() / n - alpha * pair / (n * n)
}

pub fn relative(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
