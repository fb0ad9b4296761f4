//! Central finite-difference checks of the analytic gradients, in `f64`.
//!
//! A check compares the backward pass against `(f(x + h) - f(x - h)) / 2h`
//! on up to [`MAX_SAMPLES`] randomly chosen elements of each input tensor.
//! The error of a tensor is `|g_a - g_n| / max(|g_a|, |g_n|)` over its
//! sampled elements; a check reports the worst tensor. End-to-end checks
//! pool the samples of each parameter group instead.
//!
//! Functions with kinks (ReLU, `|x|`) have a few elements where `x ± h`
//! straddles the kink. Those are found by also differencing with `h / 2`,
//! which disagrees with the `h` estimate only where `f` is not smooth on
//! `[x - h, x + h]`. Such an element is retried with smaller steps, and
//! replaced by a fresh sample if none is smooth. The probe never looks at
//! the analytic gradient.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, Var};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::flowgru::{self, HiddenState};
use crate::image;
use crate::losses::{self, LossConfig};
use crate::network::{sequence_inputs, Group, Model, ModelConfig, ModelVars};
use crate::params::{grad, ParamVars, Parameters};
use crate::tensor::{Shape, Tensor};

pub const STEP: f64 = 1e-4;
/// Step multipliers tried in turn when `[x - h, x + h]` contains a kink.
const SHRINK: [f64; 3] = [1.0, 0.1, 0.01];
pub const TOLERANCE: f64 = 1e-4;
pub const MAX_SAMPLES: usize = 64;

/// Share of sampled elements that may be dropped as kinks before the check
/// gives up.
const MAX_KINK_FRACTION: f64 = 0.25;

/// Differences below `ROUNDOFF · max(|f|, 1)` are indistinguishable from
/// rounding in `f`.
const ROUNDOFF: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
    /// Elements compared.
    pub samples: usize,
    /// Elements skipped because `x ± h` straddles a kink.
    pub kinks: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error <= TOLERANCE
    }
}

/// Norm-wise relative error; zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Sampled analytic and numeric derivatives, pooled under a key; the error
/// of a pool is the norm-wise relative error of its samples.
#[derive(Default)]
struct Accumulator {
    pools: BTreeMap<String, Pool>,
}

#[derive(Default)]
struct Pool {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
    kinks: usize,
    labels: Vec<String>,
}

impl Accumulator {
    /// Differences `eval(i, delta)` on up to `max_samples` elements of the
    /// tensor whose analytic gradient is `analytic`. `value` is the
    /// unperturbed function value, which sets the roundoff floor.
    #[allow(clippy::too_many_arguments)]
    fn tensor(
        &mut self,
        label: &str,
        pool: String,
        analytic: &Tensor<f64>,
        value: f64,
        max_samples: usize,
        rng: &mut ChaCha8Rng,
        mut eval: impl FnMut(usize, f64) -> Result<f64>,
    ) -> Result<()> {
        let len = analytic.len();
        let order = sample(rng, len, len).into_vec();
        let rms = (analytic.data().iter().map(|g| g * g).sum::<f64>() / len as f64).sqrt();
        let floor = ROUNDOFF * value.abs().max(1.0);
        let p = self.pools.entry(pool).or_default();
        p.labels.push(label.to_string());
        let mut taken = 0usize;
        for i in order {
            if taken == max_samples {
                break;
            }
            let mut smooth = None;
            for h in SHRINK.map(|k| STEP * k) {
                let full = (eval(i, h)? - eval(i, -h)?) / (2.0 * h);
                let half = (eval(i, h / 2.0)? - eval(i, -h / 2.0)?) / h;
                if (full - half).abs() <= (0.1 * TOLERANCE * full.abs().max(rms)).max(floor) {
                    smooth = Some(full);
                    break;
                }
            }
            let Some(numeric) = smooth else {
                p.kinks += 1;
                continue;
            };
            p.analytic.push(analytic.data()[i]);
            p.numeric.push(numeric);
            taken += 1;
        }
        Ok(())
    }

    /// Fails if more than [`MAX_KINK_FRACTION`] of a pool's sampled
    /// elements sit on kinks.
    fn finish(self, name: &str) -> Result<CheckResult> {
        for (key, p) in &self.pools {
            let total = p.analytic.len() + p.kinks;
            if p.kinks as f64 > MAX_KINK_FRACTION * total as f64 {
                let what = if p.labels.len() == 1 {
                    p.labels[0].clone()
                } else {
                    format!("{name} {key}")
                };
                return Err(Error::Numeric {
                    op: "gradcheck",
                    detail: format!("{what}: {} of {total} sampled elements sit on kinks", p.kinks),
                });
            }
        }
        Ok(CheckResult {
            name: name.to_string(),
            rel_error: self
                .pools
                .values()
                .map(|p| relative_error(&p.analytic, &p.numeric))
                .fold(0.0, f64::max),
            samples: self.pools.values().map(|p| p.analytic.len()).sum(),
            kinks: self.pools.values().map(|p| p.kinks).sum(),
        })
    }
}

fn scalar_check(out: &Var<f64>, name: &str) -> Result<()> {
    if out.value().len() != 1 {
        return Err(Error::shape("gradcheck", format!("{name}: output {:?} is not a scalar", out.shape())));
    }
    Ok(())
}

/// Checks the gradient of the scalar `f` with respect to each of `inputs`.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor<f64>], max_samples: usize, seed: u64, f: F) -> Result<CheckResult>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let vars: Vec<_> = inputs.iter().cloned().map(Var::param).collect();
    let out = f(&vars)?;
    scalar_check(&out, name)?;
    let grads = backward(&out)?;
    let value = out.item();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Accumulator::default();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(var);
        let label = format!("{name} input {k}");
        acc.tensor(&label, label.clone(), &analytic, value, max_samples, &mut rng, |i, delta| {
            let shifted: Vec<_> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let mut t = t.clone();
                    if j == k {
                        t.data_mut()[i] += delta;
                    }
                    Var::constant(t)
                })
                .collect();
            Ok(f(&shifted)?.item())
        })?;
    }
    acc.finish(name)
}

/// Checks a parameter gradient `analytic` of the scalar `loss` at `params`,
/// tensor by tensor.
pub fn check_params<P, F>(name: &str, params: &P, analytic: &P, max_samples: usize, seed: u64, loss: F) -> Result<CheckResult>
where
    P: Parameters<f64> + Clone,
    F: Fn(&P) -> Result<f64>,
{
    check_params_pooled(name, params, analytic, max_samples, seed, |n| n.to_string(), loss)
}

/// Like [`check_params`], with the error measured over the pools that
/// `pool` maps tensor names to.
pub fn check_params_pooled<P, F>(
    name: &str,
    params: &P,
    analytic: &P,
    max_samples: usize,
    seed: u64,
    pool: impl Fn(&str) -> String,
    loss: F,
) -> Result<CheckResult>
where
    P: Parameters<f64> + Clone,
    F: Fn(&P) -> Result<f64>,
{
    let mut grads = Vec::new();
    analytic.for_each_tensor(&mut |n, t| grads.push((n.to_string(), t.clone())));
    let value = loss(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Accumulator::default();
    for (tensor_name, g) in &grads {
        let label = format!("{name} {tensor_name}");
        acc.tensor(&label, pool(tensor_name), g, value, max_samples, &mut rng, |i, delta| {
            let mut p = params.clone();
            p.for_each_tensor_mut(&mut |n, t| {
                if n == tensor_name {
                    t.data_mut()[i] += delta;
                }
            });
            loss(&p)
        })?;
    }
    acc.finish(name)
}

/// `sum(v ⊙ w)` for a fixed weight tensor, so every output element counts.
pub fn project(v: &Var<f64>, weights: &Tensor<f64>) -> Result<Var<f64>> {
    v.mul(&Var::constant(weights.clone()))?.sum()
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Values of magnitude in `[0.1, 1]` with random sign, away from the kinks
/// of `relu` and `abs`.
fn off_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.gen::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Displacements whose fractional parts stay in `[0.1, 0.9]`.
fn fractional_flow(rng: &mut ChaCha8Rng, shape: Shape, max: i32) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-max..max) as f64 + rng.gen_range(0.1..0.9))
}

/// Adds uniform noise to every parameter, so zero-initialised biases do not
/// put ReLU inputs exactly on the kink.
fn jitter<P: Parameters<f64>>(params: &mut P, rng: &mut ChaCha8Rng, amplitude: f64) {
    params.for_each_tensor_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v += rng.gen_range(-amplitude..amplitude);
        }
    });
}

type Case = Box<dyn Fn(u64, usize) -> Result<CheckResult>>;

fn elementwise_cases() -> Vec<(String, Case)> {
    use crate::elementwise::UnaryFn::*;
    let mut cases: Vec<(String, Case)> = Vec::new();
    for f in [Sigmoid, Tanh, Relu, Exp, Log, Abs, Neg, Square] {
        cases.push((
            f.name().to_string(),
            Box::new(move |seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = Shape::new(1, 2, 4, 4);
                let x = if f == Log {
                    uniform(&mut rng, s, 0.5, 2.0)
                } else {
                    off_zero(&mut rng, s)
                };
                let w = uniform(&mut rng, s, -1.0, 1.0);
                check_inputs(f.name(), &[x], m, seed, |v| project(&v[0].unary(f)?, &w))
            }),
        ));
    }
    type BinOp = fn(&Var<f64>, &Var<f64>) -> Result<Var<f64>>;
    let binaries: [(&str, BinOp, usize); 6] = [
        ("add", |a, b| a.add(b), 2),
        ("sub", |a, b| a.sub(b), 2),
        ("mul", |a, b| a.mul(b), 2),
        ("div", |a, b| a.div(b), 2),
        ("mul_broadcast", |a, b| a.mul(b), 1),
        ("div_broadcast", |a, b| a.div(b), 1),
    ];
    for (name, op, bc) in binaries {
        cases.push((
            name.to_string(),
            Box::new(move |seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = Shape::new(1, 2, 4, 4);
                let a = off_zero(&mut rng, s);
                let b = uniform(&mut rng, Shape::new(1, bc, 4, 4), 0.5, 2.0);
                let w = uniform(&mut rng, s, -1.0, 1.0);
                check_inputs(name, &[a, b], m, seed, |v| project(&op(&v[0], &v[1])?, &w))
            }),
        ));
    }
    type StructOp = fn(&Var<f64>) -> Result<Var<f64>>;
    let structural: [(&str, StructOp); 7] = [
        ("affine", |x| x.affine(1.7, -0.3)),
        ("one_minus", |x| x.one_minus()),
        ("slice_channels", |x| x.slice_channels(1, 2)),
        ("concat", |x| Var::concat(&[x, &x.square()?])),
        ("channel_mean", |x| x.channel_mean()),
        ("avg_pool2", |x| x.avg_pool2()),
        ("box3", |x| x.box3()),
    ];
    for (name, op) in structural {
        cases.push((
            name.to_string(),
            Box::new(move |seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = uniform(&mut rng, Shape::new(1, 3, 6, 8), -1.0, 1.0);
                let shape = op(&Var::constant(x.clone()))?.shape();
                let w = uniform(&mut rng, shape, -1.0, 1.0);
                check_inputs(name, &[x], m, seed, |v| project(&op(&v[0])?, &w))
            }),
        ));
    }
    cases.push((
        "mean".into(),
        Box::new(|seed, m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = uniform(&mut rng, Shape::new(1, 2, 5, 5), -1.0, 1.0);
            check_inputs("mean", &[x], m, seed, |v| v[0].square()?.mean())
        }),
    ));
    cases
}

fn conv_case(name: &'static str, spec: ConvSpec, size: usize, transpose: bool) -> (String, Case) {
    (
        name.to_string(),
        Box::new(move |seed, m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = uniform(&mut rng, Shape::new(1, spec.in_channels, size, size), -1.0, 1.0);
            let ws = if transpose {
                spec.transpose_weight_shape()
            } else {
                spec.weight_shape()
            };
            let w = uniform(&mut rng, ws, -0.5, 0.5);
            let b = uniform(&mut rng, Shape::new(1, spec.out_channels, 1, 1), -0.5, 0.5);
            let run = |v: &[Var<f64>]| {
                if transpose {
                    v[0].conv2d_transpose(&v[1], Some(&v[2]), &spec)
                } else {
                    v[0].conv2d(&v[1], Some(&v[2]), &spec)
                }
            };
            let shape = run(&[x.clone(), w.clone(), b.clone()].map(Var::constant))?.shape();
            let proj = uniform(&mut rng, shape, -1.0, 1.0);
            check_inputs(name, &[x, w, b], m, seed, |v| project(&run(v)?, &proj))
        }),
    )
}

fn image_cases() -> Vec<(String, Case)> {
    vec![
        (
            "warp".into(),
            Box::new(|seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let src = uniform(&mut rng, Shape::new(1, 2, 6, 7), 0.0, 1.0);
                let flow = fractional_flow(&mut rng, Shape::new(1, 2, 6, 7), 2);
                let w = uniform(&mut rng, Shape::new(1, 2, 6, 7), -1.0, 1.0);
                check_inputs("warp", &[src, flow], m, seed, |v| project(&v[0].warp(&v[1])?, &w))
            }),
        ),
        (
            "ssim".into(),
            Box::new(|seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = Shape::new(1, 3, 6, 6);
                let x = uniform(&mut rng, s, 0.0, 1.0);
                let y = uniform(&mut rng, s, 0.0, 1.0);
                let w = uniform(&mut rng, s, -1.0, 1.0);
                check_inputs("ssim", &[x, y], m, seed, |v| project(&image::ssim(&v[0], &v[1])?, &w))
            }),
        ),
        (
            "laplacian".into(),
            Box::new(|seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = Shape::new(1, 2, 7, 6);
                let x = uniform(&mut rng, s, -1.0, 1.0);
                let w = uniform(&mut rng, s, -1.0, 1.0);
                check_inputs("laplacian", &[x], m, seed, |v| project(&image::laplacian(&v[0])?, &w))
            }),
        ),
        (
            "downsample2x".into(),
            Box::new(|seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = uniform(&mut rng, Shape::new(1, 2, 8, 6), -1.0, 1.0);
                let w = uniform(&mut rng, Shape::new(1, 2, 4, 3), -1.0, 1.0);
                check_inputs("downsample2x", &[x], m, seed, |v| project(&image::downsample2x(&v[0], true)?, &w))
            }),
        ),
        (
            "matching_confidence".into(),
            Box::new(|seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = Shape::new(1, 3, 5, 5);
                let a = uniform(&mut rng, s, 0.0, 1.0);
                let b = uniform(&mut rng, s, 0.0, 1.0);
                let w = uniform(&mut rng, Shape::new(1, 1, 5, 5), -1.0, 1.0);
                check_inputs("matching_confidence", &[a, b], m, seed, |v| {
                    project(&image::matching_confidence(&v[0], &v[1], 1.0)?, &w)
                })
            }),
        ),
    ]
}

fn loss_cases() -> Vec<(String, Case)> {
    let s = Shape::new(1, 1, 8, 8);
    vec![
        (
            "scale_invariant_loss".into(),
            Box::new(move |seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = uniform(&mut rng, s, 1.0, 20.0);
                let mut g = uniform(&mut rng, s, 1.0, 20.0);
                for v in g.data_mut().iter_mut().step_by(5) {
                    *v = 0.0;
                }
                check_inputs("scale_invariant_loss", &[d], m, seed, |v| {
                    losses::scale_invariant_loss(&v[0], &g, 0.5)
                })
            }),
        ),
        (
            "depth_smoothness_loss".into(),
            Box::new(move |seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = uniform(&mut rng, s, 1.0, 20.0);
                let img = uniform(&mut rng, Shape::new(1, 3, 8, 8), 0.0, 1.0);
                check_inputs("depth_smoothness_loss", &[d], m, seed, |v| {
                    losses::depth_smoothness_loss(&v[0], &img, 10.0)
                })
            }),
        ),
        (
            "flow_smoothness_loss".into(),
            Box::new(|seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f = uniform(&mut rng, Shape::new(1, 2, 8, 8), -2.0, 2.0);
                let img = uniform(&mut rng, Shape::new(1, 3, 8, 8), 0.0, 1.0);
                check_inputs("flow_smoothness_loss", &[f], m, seed, |v| {
                    losses::flow_smoothness_loss(&v[0], &img, 10.0)
                })
            }),
        ),
        (
            "photometric_loss".into(),
            Box::new(|seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = Shape::new(1, 3, 8, 8);
                let img = uniform(&mut rng, s, 0.0, 1.0);
                let warped = uniform(&mut rng, s, 0.0, 1.0);
                check_inputs("photometric_loss", &[warped], m, seed, |v| {
                    losses::photometric_loss(&img, &v[0], 0.85)
                })
            }),
        ),
    ]
}

fn small_model() -> Result<Model> {
    Model::new(ModelConfig {
        height: 8,
        width: 8,
        ..ModelConfig::default()
    })
}

fn network_cases() -> Vec<(String, Case)> {
    vec![
        (
            "flowgru_step".into(),
            Box::new(|seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let shape = flowgru::GruShape {
                    input_channels: 3,
                    hidden_channels: 2,
                    kernel: 5,
                };
                let mut params = flowgru::init_params::<f64, _>(shape, &mut rng)?;
                jitter(&mut params, &mut rng, 0.2);
                let x = uniform(&mut rng, Shape::new(1, 3, 3, 3), -1.0, 1.0);
                let h = uniform(&mut rng, Shape::new(1, 2, 3, 3), -1.0, 1.0);
                let flow = fractional_flow(&mut rng, Shape::new(1, 2, 3, 3), 1);
                let conf = uniform(&mut rng, Shape::new(1, 1, 3, 3), 0.1, 1.0);
                let w = uniform(&mut rng, Shape::new(1, 2, 3, 3), -1.0, 1.0);
                let step = |p: &flowgru::FlowGruParams<f64>, v: &[Var<f64>]| -> Result<Var<f64>> {
                    let state = HiddenState { h: v[1].clone(), t: 1 };
                    let out = flowgru::flowgru_step(&v[0], &state, &v[2], &v[3], &p.vars(false), shape.kernel)?;
                    project(&out.h, &w)
                };
                let inputs = check_inputs("flowgru_step", &[x.clone(), h.clone(), flow.clone(), conf.clone()], m, seed, |v| {
                    step(&params, v)
                })?;
                let consts = [x, h, flow, conf].map(Var::constant);
                let (_, analytic) = grad(&params, |pv| {
                    let state = HiddenState { h: consts[1].clone(), t: 1 };
                    let out = flowgru::flowgru_step(&consts[0], &state, &consts[2], &consts[3], pv, shape.kernel)?;
                    project(&out.h, &w)
                })?;
                let by_params = check_params("flowgru_step", &params, &analytic, m, seed, |p| Ok(step(p, &consts)?.item()))?;
                Ok(worst("flowgru_step", [inputs, by_params]))
            }),
        ),
        (
            "refine_flow".into(),
            Box::new(|seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let model = small_model()?;
                let mut params = model.init_params::<f64>(seed)?.flow_refine;
                jitter(&mut params, &mut rng, 0.1);
                let img = Var::constant(uniform(&mut rng, Shape::new(1, 3, 8, 8), 0.0, 1.0));
                let prev = Var::constant(uniform(&mut rng, Shape::new(1, 3, 8, 8), 0.0, 1.0));
                let flow = Var::constant(uniform(&mut rng, Shape::new(1, 2, 8, 8), -2.0, 2.0));
                let w = uniform(&mut rng, Shape::new(1, 2, 2, 2), -1.0, 1.0);
                let loss = |pv: &ParamVars<f64>| -> Result<Var<f64>> {
                    let [_, _, r3] = model.refine_flow(&img, &prev, &flow, pv)?;
                    project(&r3, &w)
                };
                let (_, analytic) = grad(&params, loss)?;
                check_params("refine_flow", &params, &analytic, m, seed, |p| Ok(loss(&p.vars(false))?.item()))
            }),
        ),
        (
            "decode".into(),
            Box::new(|seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let model = small_model()?;
                let arch = model.architecture();
                let mut params = model.init_params::<f64>(seed)?.decoder;
                jitter(&mut params, &mut rng, 0.1);
                let hidden = arch.memory.hidden_channels;
                let skip = arch.encoder[1].spec.out_channels;
                let h = Var::constant(uniform(&mut rng, Shape::new(1, hidden, 2, 2), -1.0, 1.0));
                let ss = Var::constant(uniform(&mut rng, Shape::new(1, skip, 4, 4), 0.0, 1.0));
                let st = Var::constant(uniform(&mut rng, Shape::new(1, skip, 4, 4), 0.0, 1.0));
                let w = uniform(&mut rng, Shape::new(1, 1, 8, 8), -1.0, 1.0);
                let loss = |pv: &ParamVars<f64>| -> Result<Var<f64>> { project(&model.decode(&h, &ss, &st, pv)?, &w) };
                let (_, analytic) = grad(&params, loss)?;
                check_params("decode", &params, &analytic, m, seed, |p| Ok(loss(&p.vars(false))?.item()))
            }),
        ),
        (
            "total_loss".into(),
            Box::new(|seed, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let model = small_model()?;
                let mut params = model.init_params::<f64>(seed)?;
                jitter(&mut params, &mut rng, 0.05);
                let frames: Vec<_> = (0..2).map(|_| uniform(&mut rng, Shape::new(1, 3, 8, 8), 0.0, 1.0)).collect();
                let flows = vec![
                    Tensor::zeros(Shape::new(1, 2, 8, 8)),
                    uniform(&mut rng, Shape::new(1, 2, 8, 8), -1.5, 1.5),
                ];
                let depths: Vec<_> = (0..2).map(|_| uniform(&mut rng, Shape::new(1, 1, 8, 8), 2.0, 20.0)).collect();
                let depth_refs: Vec<_> = depths.iter().collect();
                let inputs = sequence_inputs(&frames, &flows)?;
                let cfg = LossConfig::default();
                let loss = |vars: &ModelVars<f64>| -> Result<Var<f64>> {
                    let outputs = model.forward_frames(&inputs, vars)?;
                    Ok(losses::total_loss(&outputs, &inputs, &depth_refs, &cfg)?.total)
                };
                let vars = params.vars(true);
                let grads = backward(&loss(&vars)?)?;
                let analytic = vars.gradients(&grads);
                // every group must receive gradient
                for group in Group::ALL {
                    let mut norm = 0.0;
                    analytic.group(group).for_each_tensor(&mut |_, t| norm += t.data().iter().map(|v| v * v).sum::<f64>());
                    if !(norm > 0.0) {
                        return Err(Error::Numeric {
                            op: "gradcheck",
                            detail: format!("total_loss: no gradient reaches the {} group", group.name()),
                        });
                    }
                }
                // deep encoder layers get gradients near roundoff at
                // initialisation, so errors are pooled per group
                let group_of = |n: &str| n.split('/').next().unwrap_or(n).to_string();
                check_params_pooled("total_loss", &params, &analytic, m.min(4), seed, group_of, |p| {
                    Ok(loss(&p.vars(false))?.item())
                })
            }),
        ),
    ]
}

fn worst<const N: usize>(name: &str, parts: [CheckResult; N]) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        rel_error: parts.iter().map(|p| p.rel_error).fold(0.0, f64::max),
        samples: parts.iter().map(|p| p.samples).sum(),
        kinks: parts.iter().map(|p| p.kinks).sum(),
    }
}

/// Every check in the suite, by name.
pub fn cases() -> Vec<(String, Case)> {
    let mut cases = vec![
        conv_case("conv2d", ConvSpec::new(3, 1, 1, 2, 3).expect("valid spec"), 6, false),
        conv_case("conv2d_strided", ConvSpec::new(3, 2, 1, 2, 3).expect("valid spec"), 7, false),
        conv_case("conv2d_dilated", ConvSpec::new(3, 1, 2, 2, 2).expect("valid spec"), 8, false),
        conv_case("conv2d_k5", ConvSpec::new(5, 1, 1, 3, 2).expect("valid spec"), 6, false),
        conv_case("conv2d_transpose", ConvSpec::new(5, 2, 1, 3, 2).expect("valid spec"), 4, true),
    ];
    cases.extend(elementwise_cases());
    cases.extend(image_cases());
    cases.extend(loss_cases());
    cases.extend(network_cases());
    cases
}

/// Runs the whole suite. Errors inside a case are returned, not recorded
/// as failures.
pub fn run_suite(seed: u64, max_samples: usize, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (i, (_, case)) in cases().into_iter().enumerate() {
        let r = case(seed.wrapping_add(i as u64), max_samples)?;
        on_result(&r);
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_normwise() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[3.0, 4.0], &[3.0, 4.0 + 5e-3]) - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.3, -0.7, 1.1]).unwrap();
        let ok = check_inputs("square", &[x.clone()], 8, 0, |v| v[0].square()?.sum()).unwrap();
        assert!(ok.passed(), "{ok:?}");
        // value x², but the gradient only flows through one factor
        let wrong = check_inputs("half", &[x], 8, 0, |v| v[0].mul(&v[0].detach())?.sum()).unwrap();
        assert!((wrong.rel_error - 0.5).abs() < 1e-6, "{wrong:?}");
    }

    #[test]
    fn kinks_are_skipped_not_hidden() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 6), vec![3e-7, -0.4, 0.6, -0.2, 0.9, 1.3]).unwrap();
        let r = check_inputs("relu", &[x], 8, 0, |v| v[0].relu()?.sum()).unwrap();
        assert_eq!((r.kinks, r.samples), (1, 5));
        assert!(r.passed());
        // within h of the kink, but not within h / 100
        let near = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![3e-5, -0.4]).unwrap();
        let r = check_inputs("relu", &[near], 8, 0, |v| v[0].relu()?.sum()).unwrap();
        assert_eq!((r.kinks, r.samples), (0, 2));
        let crowded = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![3e-7, -2e-7]).unwrap();
        assert!(check_inputs("relu", &[crowded], 8, 0, |v| v[0].relu()?.sum()).is_err());
    }

    #[test]
    fn suite_passes() {
        let results = run_suite(11, 16, |_| {}).unwrap();
        for r in &results {
            assert!(r.passed(), "{r:?}");
        }
    }
}
