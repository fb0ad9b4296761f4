//! Synthetic sequences with exact depth and backward optical flow.
//!
//! The camera translates laterally by `camera_speed` metres per frame, so a
//! fronto-parallel layer at depth `Z` shifts by `u = f·T_x / Z` pixels per
//! frame. A scene is a textured background plane plus rectangular sprites
//! at nearer depths, drawn back to front.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Focal length in pixels.
    pub focal: f64,
    pub background_depth: f64,
    pub sprite_count: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Inclusive sprite height range in pixels.
    pub sprite_height: (usize, usize),
    /// Inclusive sprite width range in pixels.
    pub sprite_width: (usize, usize),
    /// Lateral camera motion in metres per frame.
    pub camera_speed: f64,
    pub length: usize,
    /// RMS of the smoothed noise added to the input flow, in pixels.
    pub flow_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 192,
            focal: 100.0,
            background_depth: 40.0,
            sprite_count: 4,
            depth_min: 8.0,
            depth_max: 30.0,
            sprite_height: (16, 40),
            sprite_width: (16, 48),
            camera_speed: 0.3,
            length: 8,
            flow_noise: 0.3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.length < 2 {
            return Err(Error::Config(format!("sequence length must be at least 2, got {}", self.length)));
        }
        if !(self.depth_min > 0.0 && self.depth_min <= self.depth_max && self.depth_max <= self.background_depth) {
            return Err(Error::Config(format!(
                "depths must satisfy 0 < min <= max <= background, got {} / {} / {}",
                self.depth_min, self.depth_max, self.background_depth
            )));
        }
        if !(self.focal > 0.0) || !self.camera_speed.is_finite() || !(self.flow_noise >= 0.0) {
            return Err(Error::Config("focal must be positive, speed finite and noise non-negative".into()));
        }
        let (h, w) = (self.sprite_height, self.sprite_width);
        if self.sprite_count > 0 {
            if h.0 == 0 || w.0 == 0 || h.0 > h.1 || w.0 > w.1 {
                return Err(Error::Config(format!("invalid sprite size ranges {h:?} x {w:?}")));
            }
            if h.1 > self.height || w.1 > self.width {
                return Err(Error::Config(format!(
                    "sprites up to {}x{} do not fit a {}x{} frame",
                    h.1, w.1, self.height, self.width
                )));
            }
        }
        Ok(())
    }

    /// Per-frame image displacement of a layer at depth `z`.
    pub fn displacement(&self, z: f64) -> f64 {
        self.focal * self.camera_speed / z
    }
}

/// One generated sequence. Per-frame lists all have the sequence length;
/// entry 0 of `flows`, `input_flows` and `masks` is zero because the first
/// frame has no predecessor.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample<T> {
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub frames: Vec<Tensor<T>>,
    /// `(1, 1, H, W)` in metres.
    pub depths: Vec<Tensor<T>>,
    /// Ground-truth backward flow `(1, 2, H, W)`.
    pub flows: Vec<Tensor<T>>,
    /// Flow given to the model: ground truth plus noise.
    pub input_flows: Vec<Tensor<T>>,
    /// 1 where the backward flow is valid (visible in both frames).
    pub masks: Vec<Tensor<T>>,
}

impl<T: Scalar> SequenceSample<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> SequenceSample<U> {
        let c = |v: &Vec<Tensor<T>>| v.iter().map(Tensor::cast).collect();
        SequenceSample {
            frames: c(&self.frames),
            depths: c(&self.depths),
            flows: c(&self.flows),
            input_flows: c(&self.input_flows),
            masks: c(&self.masks),
        }
    }

    /// Checks list lengths and per-frame shapes.
    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t == 0 {
            return Err(Error::Config("sequence has no frames".into()));
        }
        for (name, list) in [
            ("depths", &self.depths),
            ("flows", &self.flows),
            ("input_flows", &self.input_flows),
            ("masks", &self.masks),
        ] {
            if list.len() != t {
                return Err(Error::Config(format!("{t} frames but {} {name}", list.len())));
            }
        }
        let s = self.frames[0].shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::shape("sequence", format!("frame {s:?}")));
        }
        for i in 0..t {
            let ok = self.frames[i].shape() == s
                && self.depths[i].shape() == s.with_channels(1)
                && self.masks[i].shape() == s.with_channels(1)
                && self.flows[i].shape() == s.with_channels(2)
                && self.input_flows[i].shape() == s.with_channels(2);
            if !ok {
                return Err(Error::shape("sequence", format!("inconsistent shapes at frame {i}")));
            }
        }
        Ok(())
    }
}

/// Texture sampled at integer rows and real-valued columns.
struct Texture {
    h: usize,
    w: usize,
    data: Vec<[f64; 3]>,
}

impl Texture {
    /// Box-blurred white noise, stretched to `[0.1, 0.9]` per channel.
    fn noise(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let raw: Vec<[f64; 3]> = (0..h * w).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let mut data = vec![[0.0; 3]; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                let mut n = 0.0;
                for yy in y.saturating_sub(2)..(y + 3).min(h) {
                    for xx in x.saturating_sub(2)..(x + 3).min(w) {
                        for c in 0..3 {
                            acc[c] += raw[yy * w + xx][c];
                        }
                        n += 1.0;
                    }
                }
                data[y * w + x] = acc.map(|v| v / n);
            }
        }
        for c in 0..3 {
            let (lo, hi) = data
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[c]), hi.max(p[c])));
            let span = if hi > lo { hi - lo } else { 1.0 };
            for p in &mut data {
                p[c] = 0.1 + 0.8 * (p[c] - lo) / span;
            }
        }
        Texture { h, w, data }
    }

    fn sample(&self, y: usize, x: f64) -> [f64; 3] {
        let y = y.min(self.h - 1);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let x0 = x.floor() as usize;
        let a = x - x0 as f64;
        let p0 = self.data[y * self.w + x0];
        if a == 0.0 {
            return p0;
        }
        let p1 = self.data[y * self.w + (x0 + 1).min(self.w - 1)];
        [0, 1, 2].map(|c| (1.0 - a) * p0[c] + a * p1[c])
    }
}

struct Sprite {
    top: usize,
    height: usize,
    width: usize,
    /// Left edge at frame 0.
    left: f64,
    depth: f64,
    texture: Texture,
}

struct Scene {
    background: Texture,
    /// Back to front.
    sprites: Vec<Sprite>,
}

/// Front-most layer at a pixel: `None` for background, else sprite index.
type LayerId = Option<usize>;

impl Scene {
    fn new(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Self {
        let travel = |z: f64| (config.displacement(z).abs() * config.length as f64).ceil() as usize;
        let bg_w = config.width + travel(config.background_depth) + 2;
        let background = Texture::noise(config.height, bg_w, rng);
        let mut sprites: Vec<Sprite> = (0..config.sprite_count)
            .map(|_| {
                let height = rng.gen_range(config.sprite_height.0..=config.sprite_height.1);
                let width = rng.gen_range(config.sprite_width.0..=config.sprite_width.1);
                let depth = if config.depth_min < config.depth_max {
                    rng.gen_range(config.depth_min..=config.depth_max)
                } else {
                    config.depth_min
                };
                let top = rng.gen_range(0..=config.height - height);
                // Place the sprite so that it is centred in a random column
                // halfway through the sequence.
                let mid = config.displacement(depth) * (config.length as f64 - 1.0) / 2.0;
                let centre = rng.gen_range(0.0..config.width as f64);
                let left = (centre - width as f64 / 2.0 + mid).round();
                Sprite {
                    top,
                    height,
                    width,
                    left,
                    depth,
                    texture: Texture::noise(height, width + 1, rng),
                }
            })
            .collect();
        sprites.sort_by(|a, b| b.depth.total_cmp(&a.depth));
        Scene { background, sprites }
    }

    fn left_at(&self, s: &Sprite, t: usize, config: &SceneConfig) -> f64 {
        s.left - t as f64 * config.displacement(s.depth)
    }

    fn layer_at(&self, t: usize, y: usize, x: f64, config: &SceneConfig) -> LayerId {
        self.sprites.iter().enumerate().rev().find_map(|(i, s)| {
            let l = self.left_at(s, t, config);
            let inside = y >= s.top && y < s.top + s.height && x >= l && x < l + s.width as f64;
            inside.then_some(i)
        })
    }

    fn depth_of(&self, layer: LayerId, config: &SceneConfig) -> f64 {
        layer.map_or(config.background_depth, |i| self.sprites[i].depth)
    }

    fn colour(&self, layer: LayerId, t: usize, y: usize, x: f64, config: &SceneConfig) -> [f64; 3] {
        match layer {
            None => {
                let u = config.displacement(config.background_depth);
                // Keeps texture coordinates non-negative when the camera
                // moves left.
                let origin = if u < 0.0 { (-u * config.length as f64).ceil() } else { 0.0 };
                self.background.sample(y, x + t as f64 * u + origin)
            }
            Some(i) => {
                let s = &self.sprites[i];
                s.texture.sample(y - s.top, x - self.left_at(s, t, config))
            }
        }
    }
}

/// Renders `config.length` frames of a seeded random scene.
pub fn generate_sequence<T: Scalar>(config: &SceneConfig, seed: u64) -> Result<SequenceSample<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::new(config, &mut rng);
    let (h, w) = (config.height, config.width);
    let plane = Shape::new(1, 1, h, w);

    let mut layers: Vec<Vec<LayerId>> = Vec::with_capacity(config.length);
    let mut sample = SequenceSample {
        frames: Vec::new(),
        depths: Vec::new(),
        flows: Vec::new(),
        input_flows: Vec::new(),
        masks: Vec::new(),
    };
    for t in 0..config.length {
        let ids: Vec<LayerId> = (0..h * w)
            .map(|i| scene.layer_at(t, i / w, (i % w) as f64, config))
            .collect();
        let mut frame = Tensor::<f64>::zeros(plane.with_channels(3));
        let mut depth = Tensor::<f64>::zeros(plane);
        let mut flow = Tensor::<f64>::zeros(plane.with_channels(2));
        let mut mask = Tensor::<f64>::zeros(plane);
        for y in 0..h {
            for x in 0..w {
                let id = ids[y * w + x];
                let rgb = scene.colour(id, t, y, x as f64, config);
                for (c, v) in rgb.into_iter().enumerate() {
                    frame.set(0, c, y, x, v);
                }
                let z = scene.depth_of(id, config);
                depth.set(0, 0, y, x, z);
                if t == 0 {
                    continue;
                }
                let u = config.displacement(z);
                flow.set(0, 0, y, x, u);
                let sx = x as f64 + u;
                let x0 = sx.floor();
                let taps: &[f64] = if sx == x0 { &[x0] } else { &[x0, x0 + 1.0] };
                let valid = taps.iter().all(|&tx| {
                    tx >= 0.0 && tx <= (w - 1) as f64 && layers[t - 1][y * w + tx as usize] == id
                });
                if valid {
                    mask.set(0, 0, y, x, 1.0);
                }
            }
        }
        let noisy = if t == 0 {
            flow.clone()
        } else {
            perturb_flow(&flow, config.flow_noise, rng.gen())?
        };
        layers.push(ids);
        sample.frames.push(frame.cast());
        sample.depths.push(depth.cast());
        sample.flows.push(flow.cast());
        sample.input_flows.push(noisy.cast());
        sample.masks.push(mask.cast());
    }
    Ok(sample)
}

/// Adds spatially smoothed noise with RMS exactly `amplitude` (up to
/// rounding); `amplitude = 0` returns the input unchanged.
pub fn perturb_flow<T: Scalar>(flow: &Tensor<T>, amplitude: f64, seed: u64) -> Result<Tensor<T>> {
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(Error::Config(format!("noise amplitude must be finite and non-negative, got {amplitude}")));
    }
    if amplitude == 0.0 {
        return Ok(flow.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = flow.shape();
    let white = Tensor::<f64>::from_fn(s, |_, _, _, _| rng.gen_range(-1.0..1.0));
    let mut smooth = white.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let src = white.plane(n, c);
            let dst = smooth.plane_mut(n, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut acc = 0.0;
                    let mut k = 0.0;
                    for yy in y.saturating_sub(2)..(y + 3).min(s.h) {
                        for xx in x.saturating_sub(2)..(x + 3).min(s.w) {
                            acc += src[yy * s.w + xx];
                            k += 1.0;
                        }
                    }
                    dst[y * s.w + x] = acc / k;
                }
            }
        }
    }
    let rms = (smooth.data().iter().map(|v| v * v).sum::<f64>() / smooth.len() as f64).sqrt();
    if rms == 0.0 {
        return Ok(flow.clone());
    }
    let k = amplitude / rms;
    flow.zip_map(&smooth.cast(), |f, n| f + T::lit(k) * n)
}
