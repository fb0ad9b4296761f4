//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are dotted
//! paths into [`RunConfig`], e.g. `model.channel_scale = 8` or
//! `train.lr = 1e-4`; see [`RunConfig::keys`] for the full list.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flowgru::MemoryRegistry;
use crate::metrics::{MetricConfig, TdtNormalization};
use crate::network::ModelConfig;
use crate::synth::SceneConfig;
use crate::train::TrainConfig;

use super::read_file;

/// Parses `key = value` lines, rejecting duplicates.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(out)
}

/// Everything a CLI run can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub metrics: MetricConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    /// Number of sequences produced by `gen`.
    pub sequences: usize,
    pub seed: u64,
    pub disable_memory: bool,
    pub disable_flow_guidance: bool,
    pub disable_confidence: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            metrics: MetricConfig::default(),
            train: TrainConfig::default(),
            scene: SceneConfig::default(),
            sequences: 32,
            seed: 0,
            disable_memory: false,
            disable_flow_guidance: false,
            disable_confidence: false,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("`{key}`: expected `min, max`, got `{value}`")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

impl RunConfig {
    pub fn keys() -> &'static [&'static str] {
        &[
            "seed",
            "sequences",
            "model.channel_scale",
            "model.height",
            "model.width",
            "model.dilations",
            "model.memory",
            "model.confidence_epsilon",
            "loss.alpha",
            "loss.beta",
            "loss.gamma",
            "loss.lambda_d",
            "loss.lambda_o",
            "loss.lambda",
            "metrics.cap_min",
            "metrics.cap_max",
            "metrics.tdt_epsilon",
            "metrics.tdt_threshold",
            "metrics.intensity_scale",
            "metrics.tdt_normalization",
            "train.steps",
            "train.window",
            "train.lr",
            "train.beta1",
            "train.beta2",
            "train.eps",
            "scene.height",
            "scene.width",
            "scene.focal",
            "scene.background_depth",
            "scene.sprite_count",
            "scene.depth_min",
            "scene.depth_max",
            "scene.sprite_height",
            "scene.sprite_width",
            "scene.camera_speed",
            "scene.length",
            "scene.flow_noise",
            "ablation.disable_memory",
            "ablation.disable_flow_guidance",
            "ablation.disable_confidence",
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "sequences" => self.sequences = parse(key, v)?,
            "model.channel_scale" => self.model.channel_scale = parse(key, v)?,
            "model.height" => self.model.height = parse(key, v)?,
            "model.width" => self.model.width = parse(key, v)?,
            "model.dilations" => {
                self.model.dilations = v.split(',').map(|d| parse(key, d.trim())).collect::<Result<_>>()?
            }
            "model.memory" => self.model.memory = v.to_string(),
            "model.confidence_epsilon" => self.model.confidence_epsilon = parse(key, v)?,
            "loss.alpha" => self.train.loss.alpha = parse(key, v)?,
            "loss.beta" => self.train.loss.beta = parse(key, v)?,
            "loss.gamma" => self.train.loss.gamma = parse(key, v)?,
            "loss.lambda_d" => self.train.loss.lambda_d = parse(key, v)?,
            "loss.lambda_o" => self.train.loss.lambda_o = parse(key, v)?,
            "loss.lambda" => self.train.loss.lambda = parse(key, v)?,
            "metrics.cap_min" => self.metrics.cap_min = parse(key, v)?,
            "metrics.cap_max" => self.metrics.cap_max = parse(key, v)?,
            "metrics.tdt_epsilon" => self.metrics.tdt_epsilon = parse(key, v)?,
            "metrics.tdt_threshold" => self.metrics.tdt_threshold = parse(key, v)?,
            "metrics.intensity_scale" => self.metrics.intensity_scale = parse(key, v)?,
            "metrics.tdt_normalization" => {
                self.metrics.tdt_normalization = match v {
                    "confident" => TdtNormalization::Confident,
                    "all" => TdtNormalization::AllPixels,
                    _ => return Err(Error::Config(format!("`{key}`: expected `confident` or `all`, got `{v}`"))),
                }
            }
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.window" => self.train.window = parse(key, v)?,
            "train.lr" => self.train.adam.lr = parse(key, v)?,
            "train.beta1" => self.train.adam.beta1 = parse(key, v)?,
            "train.beta2" => self.train.adam.beta2 = parse(key, v)?,
            "train.eps" => self.train.adam.eps = parse(key, v)?,
            "scene.height" => self.scene.height = parse(key, v)?,
            "scene.width" => self.scene.width = parse(key, v)?,
            "scene.focal" => self.scene.focal = parse(key, v)?,
            "scene.background_depth" => self.scene.background_depth = parse(key, v)?,
            "scene.sprite_count" => self.scene.sprite_count = parse(key, v)?,
            "scene.depth_min" => self.scene.depth_min = parse(key, v)?,
            "scene.depth_max" => self.scene.depth_max = parse(key, v)?,
            "scene.sprite_height" => self.scene.sprite_height = parse_pair(key, v)?,
            "scene.sprite_width" => self.scene.sprite_width = parse_pair(key, v)?,
            "scene.camera_speed" => self.scene.camera_speed = parse(key, v)?,
            "scene.length" => self.scene.length = parse(key, v)?,
            "scene.flow_noise" => self.scene.flow_noise = parse(key, v)?,
            "ablation.disable_memory" => self.disable_memory = parse(key, v)?,
            "ablation.disable_flow_guidance" => self.disable_flow_guidance = parse(key, v)?,
            "ablation.disable_confidence" => self.disable_confidence = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(&parse_pairs(text)?)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_file(path.as_ref())?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.as_ref().display())))?;
        Self::from_text(&text)
    }

    /// Memory strategy selected by `model.memory` and the ablation flags;
    /// the flags take precedence.
    pub fn memory_strategy(&self) -> &str {
        match (self.disable_memory, self.disable_flow_guidance, self.disable_confidence) {
            (true, _, _) => "none",
            (false, true, true) => "convgru",
            (false, true, false) => "no-flow",
            (false, false, true) => "no-confidence",
            (false, false, false) => &self.model.memory,
        }
    }

    /// Model configuration with the ablation flags applied.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            memory: self.memory_strategy().to_string(),
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.effective_model();
        model.validate()?;
        MemoryRegistry::builtin().get(&model.memory)?;
        self.metrics.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        if self.sequences == 0 {
            return Err(Error::Config("sequences must be positive".into()));
        }
        Ok(())
    }
}
