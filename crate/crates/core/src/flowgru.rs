//! Flow-guided ConvGRU memory.
//!
//! The previous hidden state is aligned to the current frame by a
//! [`MemoryStrategy`] (warped along the refined quarter-resolution flow and
//! gated by the matching confidence in the default strategy), then mixed
//! with the current features by ordinary ConvGRU dynamics:
//!
//! ```text
//! z  = σ(Gxz ∗ x + Ghz ∗ h̄ + b_z)
//! r  = σ(Gxr ∗ x + Ghr ∗ h̄ + b_r)
//! h̃  = tanh(Gxh ∗ x + r ⊙ (Ghh ∗ h̄) + b_h)
//! h  = (1 − z) ⊙ h̄ + z ⊙ h̃
//! ```
//!
//! Biases live on the `Gx*` layers; the `Gh*` layers have none.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::Var;
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::params::{Layer, ParamSet, ParamVars};
use crate::tensor::{Scalar, Shape, Tensor};

/// Layers `Gxz, Ghz, Gxr, Ghr, Gxh, Ghh`.
pub type FlowGruParams<T> = ParamSet<T>;

pub const GATE_LAYERS: [&str; 6] = ["Gxz", "Ghz", "Gxr", "Ghr", "Gxh", "Ghh"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruShape {
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
}

impl GruShape {
    fn spec(&self, from_input: bool) -> Result<ConvSpec> {
        let inp = if from_input {
            self.input_channels
        } else {
            self.hidden_channels
        };
        ConvSpec::new(self.kernel, 1, 1, inp, self.hidden_channels)
    }
}

pub fn init_params<T: Scalar, R: Rng>(shape: GruShape, rng: &mut R) -> Result<FlowGruParams<T>> {
    let mut p = ParamSet::new();
    for name in GATE_LAYERS {
        let from_input = name.starts_with("Gx");
        p.insert(name, Layer::for_conv(&shape.spec(from_input)?, from_input, rng));
    }
    Ok(p)
}

#[derive(Clone, Debug)]
pub struct HiddenState<T: Scalar> {
    pub h: Var<T>,
    /// Number of steps that produced this state; 0 for the initial state.
    pub t: usize,
}

impl<T: Scalar> HiddenState<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        self.h.value()
    }

    pub fn detach(&self) -> Self {
        HiddenState {
            h: self.h.detach(),
            t: self.t,
        }
    }
}

/// All-zero state at `t = 0`.
pub fn init_state<T: Scalar>(hidden_channels: usize, height: usize, width: usize) -> Result<HiddenState<T>> {
    if hidden_channels == 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "hidden state dimensions must be positive: {hidden_channels}x{height}x{width}"
        )));
    }
    Ok(HiddenState {
        h: Var::constant(Tensor::zeros(Shape::new(1, hidden_channels, height, width))),
        t: 0,
    })
}

fn check_alignment_inputs<T: Scalar>(h: &Var<T>, flow: &Var<T>, conf: &Var<T>) -> Result<()> {
    let (hs, fs, cs) = (h.shape(), flow.shape(), conf.shape());
    if fs.c != 2 || fs.h != hs.h || fs.w != hs.w {
        return Err(Error::shape("align_state", format!("flow {fs:?} for state {hs:?}")));
    }
    if cs.c != 1 || cs.h != hs.h || cs.w != hs.w {
        return Err(Error::shape("align_state", format!("confidence {cs:?} for state {hs:?}")));
    }
    Ok(())
}

/// `h̄ = conf ⊙ warp(h_prev, flow)`, with the single-channel confidence
/// shared by every hidden channel.
pub fn align_state<T: Scalar>(h_prev: &HiddenState<T>, flow_q: &Var<T>, conf: &Var<T>) -> Result<Var<T>> {
    check_alignment_inputs(&h_prev.h, flow_q, conf)?;
    h_prev.h.warp(flow_q)?.mul(conf)
}

/// Gate activations of one step, kept for inspection and tests.
#[derive(Clone, Debug)]
pub struct Gates<T: Scalar> {
    pub update: Var<T>,
    pub reset: Var<T>,
    pub candidate: Var<T>,
}

/// GRU dynamics on an already aligned state `h_bar`.
pub fn gru_update<T: Scalar>(
    x: &Var<T>,
    h_bar: &Var<T>,
    t_prev: usize,
    params: &ParamVars<T>,
    kernel: usize,
) -> Result<(HiddenState<T>, Gates<T>)> {
    let (xs, hs) = (x.shape(), h_bar.shape());
    if xs.h != hs.h || xs.w != hs.w {
        return Err(Error::shape("flowgru_step", format!("input {xs:?} vs state {hs:?}")));
    }
    let shape = GruShape {
        input_channels: xs.c,
        hidden_channels: hs.c,
        kernel,
    };
    let sx = shape.spec(true)?;
    let sh = shape.spec(false)?;
    let gate = |xl: &str, hl: &str| -> Result<Var<T>> {
        params.layer(xl)?.conv(x, &sx)?.add(&params.layer(hl)?.conv(h_bar, &sh)?)
    };
    let update = gate("Gxz", "Ghz")?.sigmoid()?;
    let reset = gate("Gxr", "Ghr")?.sigmoid()?;
    let candidate = params
        .layer("Gxh")?
        .conv(x, &sx)?
        .add(&reset.mul(&params.layer("Ghh")?.conv(h_bar, &sh)?)?)?
        .tanh()?;
    let h = update
        .one_minus()?
        .mul(h_bar)?
        .add(&update.mul(&candidate)?)?;
    if !h.value().is_finite() {
        return Err(Error::NonFinite { op: "flowgru_step" });
    }
    Ok((
        HiddenState { h, t: t_prev + 1 },
        Gates {
            update,
            reset,
            candidate,
        },
    ))
}

/// Aligns `h_prev` along `flow_q`, gates it by `conf`, and applies one GRU
/// update with the default flow-guided strategy.
pub fn flowgru_step<T: Scalar>(
    x: &Var<T>,
    h_prev: &HiddenState<T>,
    flow_q: &Var<T>,
    conf: &Var<T>,
    params: &ParamVars<T>,
    kernel: usize,
) -> Result<HiddenState<T>> {
    let h_bar = FlowGuided.align(h_prev, flow_q, conf)?;
    Ok(gru_update(x, &h_bar, h_prev.t, params, kernel)?.0)
}

/// How the previous hidden state is brought into the current frame before
/// the GRU update.
pub trait MemoryStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    /// Returns `h̄` for the current step. Implementations return zeros for
    /// the initial state.
    fn align<T: Scalar>(&self, h_prev: &HiddenState<T>, flow_q: &Var<T>, conf: &Var<T>) -> Result<Var<T>>
    where
        Self: Sized;
}

/// Object-safe face of [`MemoryStrategy`], dispatched per precision.
pub trait DynMemoryStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    fn align_f32(&self, h: &HiddenState<f32>, flow: &Var<f32>, conf: &Var<f32>) -> Result<Var<f32>>;
    fn align_f64(&self, h: &HiddenState<f64>, flow: &Var<f64>, conf: &Var<f64>) -> Result<Var<f64>>;
}

impl<S: MemoryStrategy> DynMemoryStrategy for S {
    fn name(&self) -> &'static str {
        MemoryStrategy::name(self)
    }

    fn description(&self) -> &'static str {
        MemoryStrategy::description(self)
    }

    fn align_f32(&self, h: &HiddenState<f32>, flow: &Var<f32>, conf: &Var<f32>) -> Result<Var<f32>> {
        self.align(h, flow, conf)
    }

    fn align_f64(&self, h: &HiddenState<f64>, flow: &Var<f64>, conf: &Var<f64>) -> Result<Var<f64>> {
        self.align(h, flow, conf)
    }
}

/// Precision dispatch for `dyn DynMemoryStrategy`.
pub trait AlignWith: Scalar {
    fn align_with(
        strategy: &dyn DynMemoryStrategy,
        h: &HiddenState<Self>,
        flow: &Var<Self>,
        conf: &Var<Self>,
    ) -> Result<Var<Self>>;
}

impl AlignWith for f32 {
    fn align_with(s: &dyn DynMemoryStrategy, h: &HiddenState<f32>, f: &Var<f32>, c: &Var<f32>) -> Result<Var<f32>> {
        s.align_f32(h, f, c)
    }
}

impl AlignWith for f64 {
    fn align_with(s: &dyn DynMemoryStrategy, h: &HiddenState<f64>, f: &Var<f64>, c: &Var<f64>) -> Result<Var<f64>> {
        s.align_f64(h, f, c)
    }
}

fn zeros_like<T: Scalar>(h: &HiddenState<T>) -> Var<T> {
    Var::constant(Tensor::zeros(h.h.shape()))
}

/// Warp along the refined flow, gate by matching confidence.
pub struct FlowGuided;

impl MemoryStrategy for FlowGuided {
    fn name(&self) -> &'static str {
        "flow-guided"
    }

    fn description(&self) -> &'static str {
        "warp the previous state along the refined flow and gate it by matching confidence"
    }

    fn align<T: Scalar>(&self, h: &HiddenState<T>, flow: &Var<T>, conf: &Var<T>) -> Result<Var<T>> {
        if h.t == 0 {
            return Ok(zeros_like(h));
        }
        align_state(h, flow, conf)
    }
}

/// Warp along the refined flow without confidence gating.
pub struct WarpOnly;

impl MemoryStrategy for WarpOnly {
    fn name(&self) -> &'static str {
        "no-confidence"
    }

    fn description(&self) -> &'static str {
        "warp the previous state along the refined flow, no confidence gating"
    }

    fn align<T: Scalar>(&self, h: &HiddenState<T>, flow: &Var<T>, conf: &Var<T>) -> Result<Var<T>> {
        if h.t == 0 {
            return Ok(zeros_like(h));
        }
        check_alignment_inputs(&h.h, flow, conf)?;
        h.h.warp(flow)
    }
}

/// Confidence gating with zero flow: the state is not moved.
pub struct NoFlow;

impl MemoryStrategy for NoFlow {
    fn name(&self) -> &'static str {
        "no-flow"
    }

    fn description(&self) -> &'static str {
        "gate the unwarped previous state by matching confidence"
    }

    fn align<T: Scalar>(&self, h: &HiddenState<T>, flow: &Var<T>, conf: &Var<T>) -> Result<Var<T>> {
        if h.t == 0 {
            return Ok(zeros_like(h));
        }
        check_alignment_inputs(&h.h, flow, conf)?;
        h.h.mul(conf)
    }
}

/// Plain ConvGRU: the previous state is used as is.
pub struct PlainConvGru;

impl MemoryStrategy for PlainConvGru {
    fn name(&self) -> &'static str {
        "convgru"
    }

    fn description(&self) -> &'static str {
        "plain ConvGRU, previous state neither warped nor gated"
    }

    fn align<T: Scalar>(&self, h: &HiddenState<T>, _flow: &Var<T>, _conf: &Var<T>) -> Result<Var<T>> {
        if h.t == 0 {
            return Ok(zeros_like(h));
        }
        Ok(h.h.clone())
    }
}

/// Memory disabled: `h̄` is zero at every step, so frames are independent.
pub struct NoMemory;

impl MemoryStrategy for NoMemory {
    fn name(&self) -> &'static str {
        "none"
    }

    fn description(&self) -> &'static str {
        "memory disabled, every frame is predicted independently"
    }

    fn align<T: Scalar>(&self, h: &HiddenState<T>, _flow: &Var<T>, _conf: &Var<T>) -> Result<Var<T>> {
        Ok(zeros_like(h))
    }
}

/// Memory strategies by name.
#[derive(Clone)]
pub struct MemoryRegistry {
    entries: BTreeMap<&'static str, Arc<dyn DynMemoryStrategy>>,
}

impl MemoryRegistry {
    pub fn empty() -> Self {
        MemoryRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(FlowGuided));
        r.register(Arc::new(WarpOnly));
        r.register(Arc::new(NoFlow));
        r.register(Arc::new(PlainConvGru));
        r.register(Arc::new(NoMemory));
        r
    }

    pub fn register(&mut self, strategy: Arc<dyn DynMemoryStrategy>) {
        self.entries.insert(strategy.name(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn DynMemoryStrategy>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<dyn DynMemoryStrategy>> {
        self.entries.values()
    }
}

impl Default for MemoryRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SHAPE: GruShape = GruShape {
        input_channels: 4,
        hidden_channels: 3,
        kernel: 5,
    };

    fn zero_flow(h: usize, w: usize) -> Var<f64> {
        Var::constant(Tensor::zeros(Shape::new(1, 2, h, w)))
    }

    fn const_conf(v: f64, h: usize, w: usize) -> Var<f64> {
        Var::constant(Tensor::full(Shape::new(1, 1, h, w), v))
    }

    fn random_state(t: usize, rng: &mut ChaCha8Rng) -> HiddenState<f64> {
        HiddenState {
            h: Var::constant(Tensor::uniform(Shape::new(1, 3, 5, 6), -1.0, 1.0, rng)),
            t,
        }
    }

    #[test]
    fn init_state_is_zero() {
        let a = init_state::<f32>(64, 20, 60).unwrap();
        assert_eq!(a.tensor().shape(), Shape::new(1, 64, 20, 60));
        assert!(a.tensor().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.t, 0);
        assert_eq!(a.tensor(), init_state::<f32>(64, 20, 60).unwrap().tensor());
    }

    #[test]
    fn alignment_with_identity_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_state(1, &mut rng);
        let same = align_state(&h, &zero_flow(5, 6), &const_conf(1.0, 5, 6)).unwrap();
        assert_eq!(same.value(), h.tensor());
        let half = align_state(&h, &zero_flow(5, 6), &const_conf(0.5, 5, 6)).unwrap();
        for (a, b) in half.value().data().iter().zip(h.tensor().data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn integer_flow_shifts_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_state(1, &mut rng);
        let flow = Var::constant(Tensor::from_fn(Shape::new(1, 2, 5, 6), |_, c, _, _| if c == 0 { 1.0 } else { 0.0 }));
        let out = align_state(&h, &flow, &const_conf(1.0, 5, 6)).unwrap();
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..6 {
                    let src = (x + 1).min(5);
                    assert_eq!(out.value().at(0, c, y, x), h.tensor().at(0, c, y, src));
                }
            }
        }
    }

    #[test]
    fn zero_parameters_halve_the_aligned_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_params::<f64, _>(SHAPE, &mut rng).unwrap().zeroed().vars(false);
        let x = Var::constant(Tensor::uniform(Shape::new(1, 4, 5, 6), -1.0, 1.0, &mut rng));
        let h = random_state(1, &mut rng);
        let out = flowgru_step(&x, &h, &zero_flow(5, 6), &const_conf(1.0, 5, 6), &params, 5).unwrap();
        assert_eq!(out.t, 2);
        for (a, b) in out.tensor().data().iter().zip(h.tensor().data()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    fn with_update_bias(b: f64, rng: &mut ChaCha8Rng) -> ParamSet<f64> {
        let mut p = init_params::<f64, _>(SHAPE, rng).unwrap();
        let bias = p.get_mut("Gxz").unwrap().bias.as_mut().unwrap();
        bias.data_mut().iter_mut().for_each(|v| *v = b);
        p
    }

    #[test]
    fn saturated_update_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Var::constant(Tensor::uniform(Shape::new(1, 4, 5, 6), -0.2, 0.2, &mut rng));
        let h = random_state(1, &mut rng);
        let conf = const_conf(1.0, 5, 6);

        let overwrite = with_update_bias(50.0, &mut rng).vars(false);
        let (state, gates) = gru_update(&x, &h.h, 1, &overwrite, 5).unwrap();
        for (a, b) in state.tensor().data().iter().zip(gates.candidate.value().data()) {
            assert!((a - b).abs() < 1e-9);
        }

        let keep = with_update_bias(-50.0, &mut rng).vars(false);
        let out = flowgru_step(&x, &h, &zero_flow(5, 6), &conf, &keep, 5).unwrap();
        for (a, b) in out.tensor().data().iter().zip(h.tensor().data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn first_step_with_zero_flow_is_plain_convgru() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = init_params::<f64, _>(SHAPE, &mut rng).unwrap().vars(false);
        let x = Var::constant(Tensor::uniform(Shape::new(1, 4, 5, 6), -1.0, 1.0, &mut rng));
        let h0 = init_state::<f64>(3, 5, 6).unwrap();
        let guided = flowgru_step(&x, &h0, &zero_flow(5, 6), &const_conf(1.0, 5, 6), &params, 5).unwrap();
        let plain = PlainConvGru.align(&h0, &zero_flow(5, 6), &const_conf(1.0, 5, 6)).unwrap();
        let (plain, _) = gru_update(&x, &plain, 0, &params, 5).unwrap();
        assert_eq!(guided.tensor(), plain.tensor());
    }

    #[test]
    fn registry_resolves_builtins() {
        let r = MemoryRegistry::builtin();
        let names: Vec<_> = r.names().collect();
        assert_eq!(names, ["convgru", "flow-guided", "no-confidence", "no-flow", "none"]);
        assert_eq!(r.get("flow-guided").unwrap().name(), "flow-guided");
        assert!(matches!(r.get("trajgru"), Err(Error::UnknownStrategy(_))));
    }

    #[test]
    fn disabled_memory_ignores_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random_state(3, &mut rng);
        let out = f64::align_with(&NoMemory, &h, &zero_flow(5, 6), &const_conf(1.0, 5, 6)).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }
}
