//! Truncated-BPTT training on random windows of a dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::backward;
use crate::error::{Error, Result};
use crate::flowgru::AlignWith;
use crate::losses::{total_loss, LossConfig};
use crate::network::{FrameInput, Model, ModelParams};
use crate::optim::{AdamConfig, AdamState};
use crate::synth::SequenceSample;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Frames per window; gradients do not cross window boundaries.
    pub window: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            window: 4,
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!("window must be at least 2 frames, got {}", self.window)));
        }
        let a = self.adam;
        if !(a.lr >= 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    /// Optimizer step count after this update (1-based).
    pub step: u64,
    pub sequence: usize,
    pub start: usize,
    pub loss: f64,
    pub terms: Vec<(&'static str, f64)>,
}

/// Window `[start, start + len)` of `sample`; the first frame is treated as
/// the start of a sequence.
pub fn window_inputs<T>(sample: &SequenceSample<T>, start: usize, len: usize) -> Vec<FrameInput<'_, T>> {
    (start..start + len)
        .map(|t| FrameInput {
            image: &sample.frames[t],
            prev_image: (t > start).then(|| &sample.frames[t - 1]),
            flow: (t > start).then(|| &sample.input_flows[t]),
        })
        .collect()
}

/// Picks the window for optimizer step `step`; depends only on the seed
/// and the step, so interrupted runs resume identically.
pub fn sample_window<T>(dataset: &[SequenceSample<T>], window: usize, seed: u64, step: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let seq = rng.gen_range(0..dataset.len());
    let start = rng.gen_range(0..=dataset[seq].frames.len() - window);
    (seq, start)
}

/// Loss, gradient and Adam update for one window.
pub fn train_step<T: AlignWith>(
    model: &Model,
    sample: &SequenceSample<T>,
    start: usize,
    params: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<(f64, Vec<(&'static str, f64)>)> {
    let frames = window_inputs(sample, start, config.window);
    let depths: Vec<_> = sample.depths[start..start + config.window].iter().collect();
    let vars = params.vars(true);
    let outputs = model.forward_frames(&frames, &vars)?;
    let loss = total_loss(&outputs, &frames, &depths, &config.loss)?;
    if let Some(term) = loss.non_finite_term() {
        return Err(Error::LossDiverged {
            term: term.to_string(),
            step: adam.step as usize + 1,
        });
    }
    let value = loss.total.item().to_f64().unwrap_or(f64::NAN);
    let grads = backward(&loss.total)?;
    drop(outputs);
    let g = vars.gradients(&grads);
    drop(grads);
    adam.step(params, &g)?;
    Ok((value, loss.terms))
}

/// Runs `config.steps` updates and returns the per-step loss trace.
/// `on_step` sees every step's log.
pub fn train<T: AlignWith>(
    model: &Model,
    dataset: &[SequenceSample<T>],
    params: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<f64>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for (i, s) in dataset.iter().enumerate() {
        s.validate()?;
        if s.len() < config.window {
            return Err(Error::Config(format!(
                "sequence {i} has {} frames, shorter than the window of {}",
                s.len(),
                config.window
            )));
        }
    }
    adam.config = config.adam;
    let mut trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let (seq, start) = sample_window(dataset, config.window, config.seed, adam.step);
        let (loss, terms) = train_step(model, &dataset[seq], start, params, adam, config)?;
        trace.push(loss);
        on_step(&StepLog {
            step: adam.step,
            sequence: seq,
            start,
            loss,
            terms,
        });
    }
    Ok(trace)
}

/// Mean of the last `n` entries (all entries if fewer).
pub fn tail_mean(trace: &[f64], n: usize) -> f64 {
    let tail = &trace[trace.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}
