use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use flowdepth::gradcheck;
use flowdepth::io::checkpoint::Checkpoint;
use flowdepth::io::config::RunConfig;
use flowdepth::io::dataset::{list_sequences, load_sequence, save_sequence, sequence_dir};
use flowdepth::io::pfm::{read_pfm, write_pfm};
use flowdepth::io::ppm::write_ppm;
use flowdepth::io::report::{format_report, write_report};
use flowdepth::io::DATA_DIR_ENV;
use flowdepth::metrics::{evaluate_sequence, MetricReport, Scaling};
use flowdepth::network::Model;
use flowdepth::optim::AdamState;
use flowdepth::synth::{generate_sequence, SequenceSample};
use flowdepth::train::{tail_mean, train};
use flowdepth::Tensor;

mod render;

#[derive(Parser)]
#[command(name = "flowdepth", version, about = "Flow-guided recurrent depth prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides a configuration key, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalingArg {
    None,
    Sequence,
}

impl From<ScalingArg> for Scaling {
    fn from(s: ScalingArg) -> Self {
        match s {
            ScalingArg::None => Scaling::None,
            ScalingArg::Sequence => Scaling::PerSequence,
        }
    }
}

/// Where predicted depth comes from.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct Predictions {
    /// Run this checkpoint on each sequence.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Read `<dir>/<sequence>/depth_NNN.pfm`.
    #[arg(long)]
    pred: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory; defaults to $FLOWDEPTH_DATA.
    #[arg(long, env = DATA_DIR_ENV)]
    data: PathBuf,
    #[command(flatten)]
    predictions: Predictions,
    #[arg(long, value_enum, default_value = "sequence")]
    scaling: ScalingArg,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Number of sequences; overrides `sequences`.
        #[arg(long)]
        sequences: Option<usize>,
    },
    /// Train a model and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = DATA_DIR_ENV)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Print the loss every N steps to stderr; 0 disables.
        #[arg(long, default_value_t = 50)]
        log_every: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Depth metrics and temporal consistency over a dataset.
    Eval(EvalArgs),
    /// Temporal consistency only.
    Tdt(EvalArgs),
    /// Finite-difference gradient checks of every differentiable primitive.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::MAX_SAMPLES)]
        samples: usize,
    },
    /// Run a checkpoint over one sequence and write depth maps.
    Demo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Depth range of the colour ramp.
        #[arg(long, default_value_t = 1.0)]
        min_depth: f64,
        #[arg(long, default_value_t = 80.0)]
        max_depth: f64,
    },
}

fn print_report(entries: &[(impl AsRef<str>, impl AsRef<str>)], file: Option<&Path>) -> Result<()> {
    print!("{}", format_report(entries));
    if let Some(p) = file {
        write_report(p, entries)?;
    }
    Ok(())
}

fn gen(common: &Common, out: &Path, sequences: Option<usize>) -> Result<()> {
    let cfg = common.load()?;
    let n = sequences.unwrap_or(cfg.sequences);
    for i in 0..n {
        let sample = generate_sequence::<f32>(&cfg.scene, cfg.seed.wrapping_add(i as u64))?;
        save_sequence(sequence_dir(out, i), &sample)?;
    }
    print_report(&[("sequences", n.to_string()), ("frames", cfg.scene.length.to_string())], None)
}

fn load_all(data: &Path) -> Result<Vec<(PathBuf, SequenceSample<f32>)>> {
    let dirs = list_sequences(data)?;
    if dirs.is_empty() {
        bail!("no sequences under {}", data.display());
    }
    dirs.into_iter()
        .map(|d| {
            let s = load_sequence(&d)?;
            Ok((d, s))
        })
        .collect()
}

fn run_train(common: &Common, data: &Path, out: &Path, steps: Option<usize>, log_every: u64, report: Option<&Path>) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let dataset: Vec<_> = load_all(data)?.into_iter().map(|(_, s)| s).collect();
    let model_cfg = cfg.effective_model();
    let model = Model::new(model_cfg.clone())?;
    let mut params = model.init_params::<f32>(cfg.seed)?;
    let mut adam = AdamState::new(cfg.train.adam);
    let trace = train(&model, &dataset, &mut params, &mut adam, &cfg.train, |log| {
        if log_every > 0 && log.step % log_every == 0 {
            eprintln!("step {} loss {:.6}", log.step, log.loss);
        }
    })?;
    Checkpoint::new(model_cfg.clone(), params, adam).save(out)?;
    let head = &trace[..trace.len().min(10)];
    let f = |v: f64| format!("{v:.9}");
    print_report(
        &[
            ("memory", model_cfg.memory),
            ("steps", trace.len().to_string()),
            ("loss_first10", f(head.iter().sum::<f64>() / head.len().max(1) as f64)),
            ("loss_last50", f(tail_mean(&trace, 50))),
            ("loss_final", f(trace.last().copied().unwrap_or(f64::NAN))),
        ],
        report,
    )
}

fn pred_path(root: &Path, seq: &Path, t: usize) -> PathBuf {
    root.join(seq.file_name().unwrap_or_default()).join(format!("depth_{t:03}.pfm"))
}

fn evaluate(args: &EvalArgs, tdt_only: bool) -> Result<()> {
    let cfg = args.common.load()?;
    let model = match &args.predictions.checkpoint {
        Some(p) => {
            let ck = Checkpoint::<f32>::load(p).with_context(|| format!("loading {}", p.display()))?;
            Some((Model::new(ck.config)?, ck.params))
        }
        None => None,
    };
    let mut total = MetricReport::default();
    for (dir, s) in load_all(&args.data)? {
        let depths: Vec<Tensor<f32>> = match (&model, &args.predictions.pred) {
            (Some((m, p)), _) => m.predict(&s.frames, &s.input_flows, p)?,
            (None, Some(root)) => (0..s.len())
                .map(|t| read_pfm(pred_path(root, &dir, t)))
                .collect::<flowdepth::Result<_>>()?,
            (None, None) => unreachable!("clap requires one prediction source"),
        };
        let r = evaluate_sequence(&depths, &s.depths, &s.frames, &s.flows, args.scaling.into(), &cfg.metrics)
            .with_context(|| format!("evaluating {}", dir.display()))?;
        total.merge(&r);
    }
    let entries: Vec<_> = total
        .entries()
        .into_iter()
        .filter(|(k, _)| !tdt_only || k.starts_with("tdt"))
        .collect();
    print_report(&entries, args.report.as_deref())
}

fn run_gradcheck(seed: u64, samples: usize) -> Result<bool> {
    let mut failed = 0;
    let results = gradcheck::run_suite(seed, samples, |r| {
        println!("{} {:.3e} {}", r.name, r.rel_error, if r.passed() { "pass" } else { "FAIL" });
    })?;
    for r in &results {
        if !r.passed() {
            failed += 1;
        }
    }
    println!("checks {}", results.len());
    println!("failed {failed}");
    Ok(failed == 0)
}

fn demo(checkpoint: &Path, sequence: &Path, out: &Path, range: (f64, f64)) -> Result<()> {
    let ck = Checkpoint::<f32>::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = Model::new(ck.config)?;
    let s: SequenceSample<f32> = load_sequence(sequence)?;
    let depths = model.predict(&s.frames, &s.input_flows, &ck.params)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (t, d) in depths.iter().enumerate() {
        write_pfm(out.join(format!("depth_{t:03}.pfm")), d)?;
        write_ppm(out.join(format!("depth_{t:03}.ppm")), &render::colorize(d, range.0, range.1)?)?;
    }
    print_report(&[("frames", depths.len().to_string())], None)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { common, out, sequences } => gen(&common, &out, sequences)?,
        Command::Train {
            common,
            data,
            out,
            steps,
            log_every,
            report,
        } => run_train(&common, &data, &out, steps, log_every, report.as_deref())?,
        Command::Eval(args) => evaluate(&args, false)?,
        Command::Tdt(args) => evaluate(&args, true)?,
        Command::Gradcheck { seed, samples } => return run_gradcheck(seed, samples),
        Command::Demo {
            checkpoint,
            sequence,
            out,
            min_depth,
            max_depth,
        } => demo(&checkpoint, &sequence, &out, (min_depth, max_depth))?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
