//! The full model: two-stream dilated encoder, flow refinement network,
//! flow-guided memory and decoder.
//!
//! Layer names follow the architecture table (`Econv1a` … `Econv8b`,
//! `Gxz` … `Ghh`, `Dconv1a` … `Output`, `Fconv1a` … `R3`). Feature channel
//! counts are divided by [`ModelConfig::channel_scale`]; image (3) and flow
//! (2) channels are not.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Var};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::flowgru::{self, AlignWith, DynMemoryStrategy, GruShape, HiddenState, MemoryRegistry};
use crate::image;
use crate::params::{Layer, ParamSet, ParamVars, Parameters};
use crate::tensor::{Scalar, Shape, Tensor};

pub const ENCODER_LAYERS: usize = 16;

/// Dilation of every encoder layer except the two stride-2 ones
/// (`Econv1b, Econv2b, Econv3a … Econv8b`).
pub const DEFAULT_DILATIONS: [usize; 14] = [1, 1, 2, 1, 4, 1, 8, 1, 16, 1, 16, 1, 1, 1];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channel_scale: usize,
    pub height: usize,
    pub width: usize,
    pub dilations: Vec<usize>,
    /// Name of a registered memory strategy.
    pub memory: String,
    /// Bandwidth of the matching confidence.
    pub confidence_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channel_scale: 8,
            height: 64,
            width: 192,
            dilations: DEFAULT_DILATIONS.to_vec(),
            memory: "flow-guided".into(),
            confidence_epsilon: 1.0,
        }
    }
}

impl ModelConfig {
    /// Full channel widths.
    pub fn paper_scale(height: usize, width: usize) -> Self {
        ModelConfig {
            channel_scale: 1,
            height,
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_scale == 0 {
            return Err(Error::Config("channel_scale must be at least 1".into()));
        }
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "input size {}x{} must be positive and divisible by 4",
                self.height, self.width
            )));
        }
        if self.dilations.len() != DEFAULT_DILATIONS.len() || self.dilations.contains(&0) {
            return Err(Error::Config(format!(
                "expected {} positive encoder dilations, got {:?}",
                DEFAULT_DILATIONS.len(),
                self.dilations
            )));
        }
        if !(self.confidence_epsilon > 0.0) {
            return Err(Error::Config("confidence_epsilon must be positive".into()));
        }
        Ok(())
    }

    fn ch(&self, full: usize) -> usize {
        (full / self.channel_scale).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Dilated,
    UpConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Spatial,
    Temporal,
    Memory,
    Decoder,
    FlowRefine,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Spatial,
        Group::Temporal,
        Group::Memory,
        Group::Decoder,
        Group::FlowRefine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Spatial => "spatial",
            Group::Temporal => "temporal",
            Group::Memory => "memory",
            Group::Decoder => "decoder",
            Group::FlowRefine => "flow_refine",
        }
    }

    pub fn from_name(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub name: &'static str,
    pub kind: LayerKind,
    pub spec: ConvSpec,
    pub relu: bool,
}

/// Per-layer convolution geometry derived from a [`ModelConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub encoder: Vec<LayerPlan>,
    pub memory: GruShape,
    pub decoder: Vec<LayerPlan>,
    pub flow_refine: Vec<LayerPlan>,
}

const ENCODER_NAMES: [&str; ENCODER_LAYERS] = [
    "Econv1a", "Econv1b", "Econv2a", "Econv2b", "Econv3a", "Econv3b", "Econv4a", "Econv4b", "Econv5a",
    "Econv5b", "Econv6a", "Econv6b", "Econv7a", "Econv7b", "Econv8a", "Econv8b",
];
const ENCODER_WIDTHS: [usize; ENCODER_LAYERS] = [32, 32, 64, 64, 64, 64, 64, 64, 128, 128, 128, 128, 256, 256, 256, 64];
const ENCODER_DILATED: [bool; ENCODER_LAYERS] = [
    false, false, false, false, true, false, true, false, true, false, true, false, true, false, true, true,
];

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = |n| config.ch(n);

        let mut encoder = Vec::with_capacity(ENCODER_LAYERS);
        let mut in_ch = 3;
        let mut dil = config.dilations.iter();
        for (i, name) in ENCODER_NAMES.into_iter().enumerate() {
            let stride = if i == 0 || i == 2 { 2 } else { 1 };
            let dilation = if stride == 2 { 1 } else { *dil.next().expect("validated length") };
            let out = c(ENCODER_WIDTHS[i]);
            encoder.push(LayerPlan {
                name,
                kind: if ENCODER_DILATED[i] {
                    LayerKind::Dilated
                } else {
                    LayerKind::Conv
                },
                spec: ConvSpec::new(3, stride, dilation, in_ch, out)?,
                relu: true,
            });
            in_ch = out;
        }
        let features = in_ch;
        let skip = encoder[1].spec.out_channels;
        let hidden = c(64);

        let memory = GruShape {
            input_channels: 2 * features,
            hidden_channels: hidden,
            kernel: 5,
        };

        let conv = |name, kind, k, s, i, o, relu| -> Result<LayerPlan> {
            Ok(LayerPlan {
                name,
                kind,
                spec: ConvSpec::new(k, s, 1, i, o)?,
                relu,
            })
        };
        use LayerKind::{Conv, UpConv};
        let (d1, d2) = (c(32), c(16));
        let decoder = vec![
            conv("Dconv1a", UpConv, 5, 2, hidden, d1, true)?,
            conv("Dconv1b", Conv, 5, 1, d1 + 2 * skip, d1, true)?,
            conv("Dconv2a", UpConv, 5, 2, d1, d2, true)?,
            conv("Dconv2b", Conv, 5, 1, d2, d2, true)?,
            conv("Output", Conv, 5, 1, d2, 1, false)?,
        ];

        let f = c(32);
        let flow_refine = vec![
            conv("Fconv1a", Conv, 3, 1, 8, f, true)?,
            conv("Fconv1b", Conv, 3, 1, f, 2, false)?,
            conv("R1", Conv, 3, 1, 4, 2, false)?,
            conv("Fconv2a", Conv, 3, 2, f, f, true)?,
            conv("Fconv2b", Conv, 3, 1, f + 2, 2, false)?,
            conv("R2", Conv, 3, 1, 4, 2, false)?,
            conv("Fconv3a", Conv, 3, 2, f, f, true)?,
            conv("Fconv3b", Conv, 3, 1, f + 2, 2, false)?,
            conv("R3", Conv, 3, 1, 4, 2, false)?,
        ];

        Ok(Architecture {
            encoder,
            memory,
            decoder,
            flow_refine,
        })
    }

    fn find<'a>(plans: &'a [LayerPlan], name: &str) -> Result<&'a LayerPlan> {
        plans
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Config(format!("no layer `{name}` in architecture")))
    }

    pub fn decoder_layer(&self, name: &str) -> Result<&LayerPlan> {
        Self::find(&self.decoder, name)
    }

    pub fn refine_layer(&self, name: &str) -> Result<&LayerPlan> {
        Self::find(&self.flow_refine, name)
    }
}

/// All trainable parameters, one [`ParamSet`] per group.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub spatial: ParamSet<T>,
    pub temporal: ParamSet<T>,
    pub memory: ParamSet<T>,
    pub decoder: ParamSet<T>,
    pub flow_refine: ParamSet<T>,
}

fn init_group<T: Scalar>(plans: &[LayerPlan], rng: &mut ChaCha8Rng) -> ParamSet<T> {
    let mut p = ParamSet::new();
    for plan in plans {
        let layer = match plan.kind {
            LayerKind::UpConv => Layer::for_transpose(&plan.spec, rng),
            _ => Layer::for_conv(&plan.spec, true, rng),
        };
        p.insert(plan.name, layer);
    }
    p
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform weights, zero biases; deterministic in `seed`.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelParams {
            spatial: init_group(&arch.encoder, &mut rng),
            temporal: init_group(&arch.encoder, &mut rng),
            memory: flowgru::init_params(arch.memory, &mut rng)?,
            decoder: init_group(&arch.decoder, &mut rng),
            flow_refine: init_group(&arch.flow_refine, &mut rng),
        })
    }

    pub fn group(&self, g: Group) -> &ParamSet<T> {
        match g {
            Group::Spatial => &self.spatial,
            Group::Temporal => &self.temporal,
            Group::Memory => &self.memory,
            Group::Decoder => &self.decoder,
            Group::FlowRefine => &self.flow_refine,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut ParamSet<T> {
        match g {
            Group::Spatial => &mut self.spatial,
            Group::Temporal => &mut self.temporal,
            Group::Memory => &mut self.memory,
            Group::Decoder => &mut self.decoder,
            Group::FlowRefine => &mut self.flow_refine,
        }
    }

    pub fn zeroed(&self) -> Self {
        self.map(|p| p.zeroed())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            spatial: self.spatial.cast(),
            temporal: self.temporal.cast(),
            memory: self.memory.cast(),
            decoder: self.decoder.cast(),
            flow_refine: self.flow_refine.cast(),
        }
    }

    fn map(&self, f: impl Fn(&ParamSet<T>) -> ParamSet<T>) -> Self {
        ModelParams {
            spatial: f(&self.spatial),
            temporal: f(&self.temporal),
            memory: f(&self.memory),
            decoder: f(&self.decoder),
            flow_refine: f(&self.flow_refine),
        }
    }

    pub fn vars(&self, trainable: bool) -> ModelVars<T> {
        ModelVars {
            spatial: self.spatial.vars(trainable),
            temporal: self.temporal.vars(trainable),
            memory: self.memory.vars(trainable),
            decoder: self.decoder.vars(trainable),
            flow_refine: self.flow_refine.vars(trainable),
        }
    }
}

impl<T: Scalar> Parameters<T> for ModelParams<T> {
    fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for g in Group::ALL {
            self.group(g)
                .for_each_tensor(&mut |name, t| f(&format!("{}/{name}", g.name()), t));
        }
    }

    fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for g in Group::ALL {
            self.group_mut(g)
                .for_each_tensor_mut(&mut |name, t| f(&format!("{}/{name}", g.name()), t));
        }
    }
}

/// Differentiable view of [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelVars<T: Scalar> {
    pub spatial: ParamVars<T>,
    pub temporal: ParamVars<T>,
    pub memory: ParamVars<T>,
    pub decoder: ParamVars<T>,
    pub flow_refine: ParamVars<T>,
}

impl<T: Scalar> ModelVars<T> {
    pub fn gradients(&self, grads: &Gradients<T>) -> ModelParams<T> {
        ModelParams {
            spatial: self.spatial.gradients(grads),
            temporal: self.temporal.gradients(grads),
            memory: self.memory.gradients(grads),
            decoder: self.decoder.gradients(grads),
            flow_refine: self.flow_refine.gradients(grads),
        }
    }
}

/// Output shape of one layer, recorded by [`Model::trace_shapes`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRecord {
    pub group: Group,
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Downsampling factor of the input / output relative to the frame.
    pub in_rs: usize,
    pub out_rs: usize,
}

type Probe<'a> = Option<&'a mut dyn FnMut(Group, &str, Shape, Shape)>;

fn record(probe: &mut Probe<'_>, group: Group, name: &str, input: Shape, output: Shape) {
    if let Some(p) = probe {
        p(group, name, input, output);
    }
}

/// One frame of input. `prev_image` and `flow` are `None` at the first
/// frame of a sequence.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a, T> {
    pub image: &'a Tensor<T>,
    pub prev_image: Option<&'a Tensor<T>>,
    pub flow: Option<&'a Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct StepOutput<T: Scalar> {
    pub depth: Var<T>,
    /// Refined flows at full, half and quarter resolution.
    pub flows: [Var<T>; 3],
    pub hidden: HiddenState<T>,
    pub confidence: Var<T>,
    pub skip_spatial: Var<T>,
    pub skip_temporal: Var<T>,
}

impl<T: Scalar> StepOutput<T> {
    pub fn depth_map(&self) -> &Tensor<T> {
        self.depth.value()
    }
}

/// Architecture plus memory strategy.
#[derive(Clone)]
pub struct Model {
    config: ModelConfig,
    arch: Architecture,
    memory: Arc<dyn DynMemoryStrategy>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("memory", &self.memory.name())
            .finish()
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_registry(config, &MemoryRegistry::builtin())
    }

    pub fn with_registry(config: ModelConfig, registry: &MemoryRegistry) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        let memory = registry.get(&config.memory)?;
        Ok(Model { config, arch, memory })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn memory_strategy(&self) -> &dyn DynMemoryStrategy {
        &*self.memory
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ModelParams<T>> {
        ModelParams::init(&self.arch, seed)
    }

    fn check_frame<T: Scalar>(&self, op: &'static str, t: &Tensor<T>, channels: usize) -> Result<()> {
        let s = t.shape();
        if s.n != 1 || s.c != channels || s.h != self.config.height || s.w != self.config.width {
            return Err(Error::shape(
                op,
                format!(
                    "expected (1, {channels}, {}, {}), got {s:?}",
                    self.config.height, self.config.width
                ),
            ));
        }
        Ok(())
    }

    /// Runs one encoder stream; returns the quarter-resolution features and
    /// the `Econv1b` activations used as a decoder skip.
    pub fn encode_stream<T: Scalar>(&self, input: &Var<T>, params: &ParamVars<T>) -> Result<(Var<T>, Var<T>)> {
        self.encode_impl(input, params, Group::Spatial, &mut None)
    }

    fn encode_impl<T: Scalar>(
        &self,
        input: &Var<T>,
        params: &ParamVars<T>,
        group: Group,
        probe: &mut Probe<'_>,
    ) -> Result<(Var<T>, Var<T>)> {
        let s = input.shape();
        if s.c != 3 || s.h % 4 != 0 || s.w % 4 != 0 {
            return Err(Error::shape(
                "encode_stream",
                format!("input {s:?} must have 3 channels and a size divisible by 4"),
            ));
        }
        let mut x = input.clone();
        let mut skip = None;
        for (i, plan) in self.arch.encoder.iter().enumerate() {
            let y = params.layer(plan.name)?.conv(&x, &plan.spec)?.relu()?;
            record(probe, group, plan.name, x.shape(), y.shape());
            if i == 1 {
                skip = Some(y.clone());
            }
            x = y;
        }
        Ok((x, skip.expect("encoder has at least two layers")))
    }

    /// Refined flows at full, half and quarter resolution.
    pub fn refine_flow<T: Scalar>(
        &self,
        image: &Var<T>,
        prev_image: &Var<T>,
        flow: &Var<T>,
        params: &ParamVars<T>,
    ) -> Result<[Var<T>; 3]> {
        self.refine_impl(image, prev_image, flow, params, &mut None)
    }

    fn refine_impl<T: Scalar>(
        &self,
        image: &Var<T>,
        prev_image: &Var<T>,
        flow: &Var<T>,
        params: &ParamVars<T>,
        probe: &mut Probe<'_>,
    ) -> Result<[Var<T>; 3]> {
        let (si, sp, sf) = (image.shape(), prev_image.shape(), flow.shape());
        if si != sp || sf.c != 2 || sf.h != si.h || sf.w != si.w || si.c != 3 {
            return Err(Error::shape(
                "refine_flow",
                format!("image {si:?}, previous image {sp:?}, flow {sf:?}"),
            ));
        }
        let mut layer = |name: &str, x: &Var<T>| -> Result<Var<T>> {
            let plan = self.arch.refine_layer(name)?;
            let mut y = params.layer(name)?.conv(x, &plan.spec)?;
            if plan.relu {
                y = y.relu()?;
            }
            record(probe, Group::FlowRefine, name, x.shape(), y.shape());
            Ok(y)
        };
        let down = |v: &Var<T>| image::downsample2x(v, true);

        let f1a = layer("Fconv1a", &Var::concat(&[image, prev_image, flow])?)?;
        let f1b = layer("Fconv1b", &f1a)?;
        let r1 = layer("R1", &Var::concat(&[&f1b, flow])?)?;

        let flow2 = down(flow)?;
        let f2a = layer("Fconv2a", &f1a)?;
        let f2b = layer("Fconv2b", &Var::concat(&[&f2a, &down(&r1)?])?)?;
        let r2 = layer("R2", &Var::concat(&[&f2b, &flow2])?)?;

        let flow3 = down(&flow2)?;
        let f3a = layer("Fconv3a", &f2a)?;
        let f3b = layer("Fconv3b", &Var::concat(&[&f3a, &down(&r2)?])?)?;
        let r3 = layer("R3", &Var::concat(&[&f3b, &flow3])?)?;
        Ok([r1, r2, r3])
    }

    /// Depth `exp(y)` from the hidden state and the two encoder skips.
    pub fn decode<T: Scalar>(
        &self,
        h: &Var<T>,
        skip_spatial: &Var<T>,
        skip_temporal: &Var<T>,
        params: &ParamVars<T>,
    ) -> Result<Var<T>> {
        self.decode_impl(h, skip_spatial, skip_temporal, params, &mut None)
    }

    fn decode_impl<T: Scalar>(
        &self,
        h: &Var<T>,
        skip_spatial: &Var<T>,
        skip_temporal: &Var<T>,
        params: &ParamVars<T>,
        probe: &mut Probe<'_>,
    ) -> Result<Var<T>> {
        let (hs, ss, st) = (h.shape(), skip_spatial.shape(), skip_temporal.shape());
        if ss != st || ss.h != 2 * hs.h || ss.w != 2 * hs.w {
            return Err(Error::shape(
                "decode",
                format!("state {hs:?}, skips {ss:?} and {st:?}"),
            ));
        }
        let mut layer = |name: &str, x: &Var<T>| -> Result<Var<T>> {
            let plan = self.arch.decoder_layer(name)?;
            let l = params.layer(name)?;
            let mut y = match plan.kind {
                LayerKind::UpConv => l.conv_transpose(x, &plan.spec)?,
                _ => l.conv(x, &plan.spec)?,
            };
            if plan.relu {
                y = y.relu()?;
            }
            record(probe, Group::Decoder, name, x.shape(), y.shape());
            Ok(y)
        };
        let d1a = layer("Dconv1a", h)?;
        let d1b = layer("Dconv1b", &Var::concat(&[&d1a, skip_spatial, skip_temporal])?)?;
        let d2a = layer("Dconv2a", &d1b)?;
        let d2b = layer("Dconv2b", &d2a)?;
        let y = layer("Output", &d2b)?;
        let depth = y.exp()?;
        if !depth.value().is_finite() {
            return Err(Error::NonFinite { op: "decode" });
        }
        Ok(depth)
    }

    /// Temporal-stream input: the two flow components plus the flow
    /// magnitude as a third channel.
    pub fn temporal_input<T: Scalar>(flow: &Tensor<T>) -> Result<Tensor<T>> {
        let s = flow.shape();
        if s.c != 2 {
            return Err(Error::shape("temporal_input", format!("flow {s:?}")));
        }
        let mut mag = Tensor::zeros(s.with_channels(1));
        for n in 0..s.n {
            let (u, v) = (flow.plane(n, 0), flow.plane(n, 1));
            for (m, (a, b)) in mag.plane_mut(n, 0).iter_mut().zip(u.iter().zip(v)) {
                *m = (*a * *a + *b * *b).sqrt();
            }
        }
        Tensor::concat_channels(&[flow, &mag])
    }

    pub fn forward_step<T: AlignWith>(
        &self,
        frame: FrameInput<'_, T>,
        h_prev: &HiddenState<T>,
        params: &ModelVars<T>,
    ) -> Result<StepOutput<T>> {
        self.step_impl(frame, h_prev, params, &mut None)
    }

    fn step_impl<T: AlignWith>(
        &self,
        frame: FrameInput<'_, T>,
        h_prev: &HiddenState<T>,
        params: &ModelVars<T>,
        probe: &mut Probe<'_>,
    ) -> Result<StepOutput<T>> {
        self.check_frame("forward_step", frame.image, 3)?;
        let zero_flow;
        let flow = match frame.flow {
            Some(f) => {
                self.check_frame("forward_step", f, 2)?;
                f
            }
            None => {
                zero_flow = Tensor::zeros(frame.image.shape().with_channels(2));
                &zero_flow
            }
        };
        let prev = frame.prev_image.unwrap_or(frame.image);
        self.check_frame("forward_step", prev, 3)?;

        let image = Var::constant(frame.image.clone());
        let prev_image = Var::constant(prev.clone());
        let flow_var = Var::constant(flow.clone());

        let flows = self.refine_impl(&image, &prev_image, &flow_var, &params.flow_refine, probe)?;
        let (fs, skip_spatial) = self.encode_impl(&image, &params.spatial, Group::Spatial, probe)?;
        let temporal = Var::constant(Self::temporal_input(flow)?);
        let (ft, skip_temporal) = self.encode_impl(&temporal, &params.temporal, Group::Temporal, probe)?;
        let x = Var::concat(&[&fs, &ft])?;

        let quarter = |v: &Var<T>| image::downsample2x(&image::downsample2x(v, false)?, false);
        let (i3, i3_prev) = (quarter(&image)?, quarter(&prev_image)?);
        let confidence = image::matching_confidence(&i3, &i3_prev.warp(&flows[2])?, self.config.confidence_epsilon)?;

        let h_prev = if h_prev.h.shape() == x.shape().with_channels(self.arch.memory.hidden_channels) {
            h_prev.clone()
        } else {
            return Err(Error::shape(
                "forward_step",
                format!("hidden state {:?} for features {:?}", h_prev.h.shape(), x.shape()),
            ));
        };
        let h_bar = T::align_with(&*self.memory, &h_prev, &flows[2], &confidence)?;
        let (hidden, _gates) = flowgru::gru_update(&x, &h_bar, h_prev.t, &params.memory, self.arch.memory.kernel)?;
        if probe.is_some() {
            let (xs, hs) = (x.shape(), h_bar.shape());
            let out = hidden.h.shape();
            for name in ["Gxz", "Gxr", "Gxh"] {
                record(probe, Group::Memory, name, xs, out);
            }
            for name in ["Ghz", "Ghr", "Ghh"] {
                record(probe, Group::Memory, name, hs, out);
            }
        }
        let depth = self.decode_impl(&hidden.h, &skip_spatial, &skip_temporal, &params.decoder, probe)?;
        Ok(StepOutput {
            depth,
            flows,
            hidden,
            confidence,
            skip_spatial,
            skip_temporal,
        })
    }

    pub fn init_state<T: Scalar>(&self) -> Result<HiddenState<T>> {
        flowgru::init_state(
            self.arch.memory.hidden_channels,
            self.config.height / 4,
            self.config.width / 4,
        )
    }

    /// Left-to-right pass over `frames`, starting from the zero state.
    pub fn forward_frames<T: AlignWith>(
        &self,
        frames: &[FrameInput<'_, T>],
        params: &ModelVars<T>,
    ) -> Result<Vec<StepOutput<T>>> {
        if frames.is_empty() {
            return Err(Error::Config("sequence has no frames".into()));
        }
        let mut h = self.init_state()?;
        let mut out = Vec::with_capacity(frames.len());
        for frame in frames {
            let step = self.forward_step(*frame, &h, params)?;
            h = step.hidden.clone();
            out.push(step);
        }
        Ok(out)
    }

    /// Inference over a whole sequence; `flows[t]` is the input flow of
    /// frame `t` (ignored at `t = 0`).
    pub fn forward_sequence<T: AlignWith>(
        &self,
        frames: &[Tensor<T>],
        flows: &[Tensor<T>],
        params: &ModelParams<T>,
    ) -> Result<Vec<StepOutput<T>>> {
        let inputs = sequence_inputs(frames, flows)?;
        self.forward_frames(&inputs, &params.vars(false))
    }

    /// Depth maps for a whole sequence, without gradient tracking.
    pub fn predict<T: AlignWith>(
        &self,
        frames: &[Tensor<T>],
        flows: &[Tensor<T>],
        params: &ModelParams<T>,
    ) -> Result<Vec<Tensor<T>>> {
        Ok(self
            .forward_sequence(frames, flows, params)?
            .iter()
            .map(|o| o.depth_map().clone())
            .collect())
    }

    /// Output shape of every layer for one forward step on the given frame
    /// pair, in execution order.
    pub fn trace_shapes<T: AlignWith>(
        &self,
        frame: FrameInput<'_, T>,
        params: &ModelParams<T>,
    ) -> Result<Vec<LayerRecord>> {
        let (fh, fw) = (self.config.height, self.config.width);
        let mut records = Vec::new();
        let mut sink = |group: Group, name: &str, i: Shape, o: Shape| {
            let rs = |s: Shape| {
                debug_assert_eq!(fw * s.h, fh * s.w);
                fh / s.h
            };
            records.push(LayerRecord {
                group,
                name: name.to_string(),
                in_channels: i.c,
                out_channels: o.c,
                in_rs: rs(i),
                out_rs: rs(o),
            });
        };
        let h0 = self.init_state()?;
        self.step_impl(frame, &h0, &params.vars(false), &mut Some(&mut sink))?;
        Ok(records)
    }
}

/// Pairs each frame with its predecessor and input flow.
pub fn sequence_inputs<'a, T: Scalar>(frames: &'a [Tensor<T>], flows: &'a [Tensor<T>]) -> Result<Vec<FrameInput<'a, T>>> {
    if flows.len() != frames.len() {
        return Err(Error::Config(format!(
            "{} frames but {} flows (entry 0 is the unused first-frame flow)",
            frames.len(),
            flows.len()
        )));
    }
    Ok(frames
        .iter()
        .enumerate()
        .map(|(t, image)| FrameInput {
            image,
            prev_image: (t > 0).then(|| &frames[t - 1]),
            flow: (t > 0).then(|| &flows[t]),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small(memory: &str) -> Model {
        Model::new(ModelConfig {
            height: 16,
            width: 24,
            memory: memory.into(),
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn random_frames(n: usize, seed: u64) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..n)
            .map(|_| Tensor::uniform(Shape::new(1, 3, 16, 24), 0.0, 1.0, &mut rng))
            .collect();
        let flows = (0..n)
            .map(|_| Tensor::uniform(Shape::new(1, 2, 16, 24), -2.0, 2.0, &mut rng))
            .collect();
        (frames, flows)
    }

    #[test]
    fn desk_scale_channel_plan() {
        let arch = Architecture::new(&ModelConfig::default()).unwrap();
        let io: Vec<_> = arch.encoder.iter().map(|p| (p.spec.in_channels, p.spec.out_channels)).collect();
        assert_eq!(io[0], (3, 4));
        assert_eq!(io[15], (32, 8));
        assert_eq!(arch.memory.input_channels, 16);
        assert_eq!(arch.memory.hidden_channels, 8);
        assert_eq!(arch.decoder_layer("Dconv1b").unwrap().spec.in_channels, 12);
        assert_eq!(arch.refine_layer("Fconv2b").unwrap().spec.in_channels, 6);
        let dil: Vec<_> = arch.encoder.iter().map(|p| p.spec.dilation).collect();
        assert_eq!(dil, [1, 1, 1, 1, 2, 1, 4, 1, 8, 1, 16, 1, 16, 1, 1, 1]);
    }

    #[test]
    fn config_validation() {
        for bad in [
            ModelConfig { height: 18, ..ModelConfig::default() },
            ModelConfig { channel_scale: 0, ..ModelConfig::default() },
            ModelConfig { dilations: vec![1; 3], ..ModelConfig::default() },
        ] {
            assert!(matches!(Model::new(bad), Err(Error::Config(_))));
        }
        assert!(matches!(
            Model::new(ModelConfig { memory: "lstm".into(), ..ModelConfig::default() }),
            Err(Error::UnknownStrategy(_))
        ));
    }

    #[test]
    fn zero_parameters_give_unit_depth_and_zero_flow() {
        let model = small("flow-guided");
        let params = model.init_params::<f64>(1).unwrap().zeroed();
        let (frames, flows) = random_frames(2, 2);
        let out = model.forward_sequence(&frames, &flows, &params).unwrap();
        for step in &out {
            assert!(step.depth_map().data().iter().all(|&d| d == 1.0));
            for (r, size) in step.flows.iter().zip([(16, 24), (8, 12), (4, 6)]) {
                assert_eq!(r.shape(), Shape::new(1, 2, size.0, size.1));
                assert!(r.value().data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn zero_input_encodes_to_zero() {
        let model = small("flow-guided");
        let params = model.init_params::<f64>(3).unwrap();
        let (feat, skip) = model
            .encode_stream(&Var::constant(Tensor::zeros(Shape::new(1, 3, 16, 24))), &params.spatial.vars(false))
            .unwrap();
        assert_eq!(feat.shape(), Shape::new(1, 8, 4, 6));
        assert_eq!(skip.shape(), Shape::new(1, 4, 8, 12));
        assert!(feat.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn streams_have_independent_parameters() {
        let model = small("flow-guided");
        let params = model.init_params::<f64>(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Var::constant(Tensor::uniform(Shape::new(1, 3, 16, 24), 0.0, 1.0, &mut rng));
        let (a, _) = model.encode_stream(&x, &params.spatial.vars(false)).unwrap();
        let (b, _) = model.encode_stream(&x, &params.temporal.vars(false)).unwrap();
        assert_ne!(a.value(), b.value());
    }

    #[test]
    fn static_scene_has_full_confidence() {
        let model = small("flow-guided");
        let params = model.init_params::<f64>(6).unwrap().zeroed();
        let (frames, _) = random_frames(1, 7);
        let zero = Tensor::zeros(Shape::new(1, 2, 16, 24));
        let out = model
            .forward_sequence(&[frames[0].clone(), frames[0].clone()], &[zero.clone(), zero], &params)
            .unwrap();
        assert!(out[1].confidence.value().data().iter().all(|&c| c == 1.0));
    }

    #[test]
    fn sequence_is_deterministic_and_bounded() {
        let model = small("flow-guided");
        let params = model.init_params::<f64>(8).unwrap();
        let (frames, flows) = random_frames(3, 9);
        let a = model.forward_sequence(&frames, &flows, &params).unwrap();
        let b = model.forward_sequence(&frames, &flows, &params).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.depth_map(), y.depth_map());
            assert!(x.depth_map().data().iter().all(|&d| d > 0.0));
            assert!(x.hidden.tensor().max_abs() <= 1.0);
        }
        let single = model.forward_sequence(&frames[..1], &flows[..1], &params).unwrap();
        assert_eq!(single[0].depth_map(), a[0].depth_map());
    }

    #[test]
    fn memory_ablation_removes_temporal_dependence() {
        let (frames, flows) = random_frames(3, 10);
        let (mut other, _) = random_frames(3, 11);
        other[2] = frames[2].clone();
        for (memory, dependent) in [("flow-guided", true), ("none", false)] {
            let model = small(memory);
            let params = model.init_params::<f64>(12).unwrap();
            let a = model.forward_sequence(&frames, &flows, &params).unwrap();
            let b = model.forward_sequence(&other, &flows, &params).unwrap();
            let differs = a[2].depth_map() != b[2].depth_map();
            assert_eq!(differs, dependent, "{memory}");
        }
    }

    #[test]
    fn trace_covers_every_layer() {
        let model = small("flow-guided");
        let params = model.init_params::<f64>(13).unwrap();
        let (frames, flows) = random_frames(2, 14);
        let inputs = sequence_inputs(&frames, &flows).unwrap();
        let trace = model.trace_shapes(inputs[1], &params).unwrap();
        assert_eq!(trace.len(), 2 * 16 + 9 + 6 + 5);
        let out = trace.iter().find(|r| r.name == "Output").unwrap();
        assert_eq!((out.in_channels, out.out_channels, out.in_rs, out.out_rs), (2, 1, 1, 1));
    }

    #[test]
    fn parameter_names_are_grouped() {
        let model = small("flow-guided");
        let params = model.init_params::<f32>(15).unwrap();
        let mut names = Vec::new();
        params.for_each_tensor(&mut |n, _| names.push(n.to_string()));
        assert!(names.contains(&"spatial/Econv1a.weight".to_string()));
        assert!(names.contains(&"memory/Ghh.weight".to_string()));
        assert!(!names.contains(&"memory/Ghh.bias".to_string()));
        assert!(names.contains(&"flow_refine/R3.bias".to_string()));
    }
}
