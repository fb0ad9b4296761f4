//! Colour-mapped depth previews.

use flowdepth::{Result, Shape, Tensor};

/// Dark blue (near) to yellow (far), roughly perceptually uniform.
const RAMP: [[f32; 3]; 5] = [
    [0.267, 0.005, 0.329],
    [0.230, 0.322, 0.546],
    [0.128, 0.567, 0.551],
    [0.369, 0.789, 0.383],
    [0.993, 0.906, 0.144],
];

/// Ramp colour at `s` in `[0, 1]`.
pub fn ramp(s: f32) -> [f32; 3] {
    let last = RAMP.len() - 1;
    let x = s.clamp(0.0, 1.0) * last as f32;
    if x >= last as f32 {
        return RAMP[last];
    }
    let i = x.floor() as usize;
    let f = x - i as f32;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    [0, 1, 2].map(|c| a[c] + f * (b[c] - a[c]))
}

/// Maps `log(depth)` linearly over `[log min, log max]` onto the ramp.
pub fn colorize(depth: &Tensor<f32>, min: f64, max: f64) -> Result<Tensor<f32>> {
    if !(min > 0.0 && min < max) {
        return Err(flowdepth::Error::Config(format!("invalid colour range ({min}, {max})")));
    }
    let s = depth.shape();
    let (lo, hi) = (min.ln(), max.ln());
    let mut out = Tensor::zeros(Shape::new(1, 3, s.h, s.w));
    let plane = s.h * s.w;
    for (i, &d) in depth.plane(0, 0).iter().enumerate() {
        let t = ((f64::from(d).max(min).ln() - lo) / (hi - lo)) as f32;
        for (c, v) in ramp(t).into_iter().enumerate() {
            out.data_mut()[c * plane + i] = v;
        }
    }
    Ok(out)
}
