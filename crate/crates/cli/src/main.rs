use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use nextformer::accounting::{count_flops, count_params, FLOPS_FRAMES};
use nextformer::config::{ChunkSpec, FEATURE_DIM};
use nextformer::encoder::ForwardOptions;
use nextformer::gradcheck::grad_check_many;
use nextformer::io::{read_checkpoint, read_features, write_features};
use nextformer::nn::{Mode, ParamStore, Pass};
use nextformer::schedule::{LrSchedule, ScheduleKind};
use nextformer::toy::{train_toy, ToyConfig};
use nextformer::{Model, ModelConfig, Preset, RandomSource, Tensor, Var};

/// Largest model `gradcheck` will perturb coordinate by coordinate.
const GRADCHECK_MAX_PARAMS: usize = 100_000;

/// Input frames per post-frontend frame (10 ms features, 40 ms frames).
const FRAME_MS: u32 = 40;

#[derive(Parser)]
#[command(name = "nextformer", version, about = "Nextformer ASR encoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PresetArg {
    ConformerS,
    ConformerL,
    NextformerS,
    NextformerL,
    NextformerXs,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::ConformerS => Preset::ConformerS,
            PresetArg::ConformerL => Preset::ConformerL,
            PresetArg::NextformerS => Preset::NextformerS,
            PresetArg::NextformerL => Preset::NextformerL,
            PresetArg::NextformerXs => Preset::NextformerXs,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Wce,
    Warmup,
}

impl From<ScheduleArg> for ScheduleKind {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Wce => ScheduleKind::Wce,
            ScheduleArg::Warmup => ScheduleKind::Warmup,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOPs accounting for a preset.
    Describe {
        #[arg(long, value_enum)]
        preset: PresetArg,
        /// Swap the frontend for the eight-layer CNN.
        #[arg(long)]
        cnn8: bool,
        #[arg(long, default_value_t = FLOPS_FRAMES)]
        frames: usize,
    },
    /// Finite-difference check of the joint loss over every parameter.
    Gradcheck {
        #[arg(long, value_enum)]
        preset: PresetArg,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, env = "NXF_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Encode a feature file and write the encoder output.
    Forward {
        #[arg(long, value_enum)]
        preset: PresetArg,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        causal: bool,
        /// Load weights instead of initializing from the seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-utterance mean and variance normalization of the input.
        #[arg(long)]
        normalize: bool,
        #[arg(long, env = "NXF_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Compare chunk-by-chunk encoding with the full causal pass.
    StreamCheck {
        #[arg(long, value_enum)]
        preset: PresetArg,
        #[arg(long, default_value_t = 640)]
        chunk_ms: u32,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = "NXF_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Overfit the XS model on the synthetic toy set.
    TrainToy {
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long, env = "NXF_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "wce")]
        schedule: ScheduleArg,
        /// Print every n-th step.
        #[arg(long, default_value_t = 10)]
        log_every: u64,
        /// Keep training after the first error-free evaluation.
        #[arg(long)]
        no_early_stop: bool,
    },
    /// Learning rate per epoch (or per step) as CSV.
    ScheduleDump {
        #[arg(long, value_enum)]
        schedule: ScheduleArg,
        #[arg(long, default_value_t = 25)]
        epochs: u64,
        #[arg(long, default_value_t = 2500)]
        steps_per_epoch: u64,
        #[arg(long, default_value_t = 25_000)]
        warmup_steps: u64,
        #[arg(long, default_value_t = 5e-4)]
        peak_lr: f64,
        /// One row per optimizer step instead of per epoch.
        #[arg(long)]
        per_step: bool,
    },
    /// Write seeded random features, for trying the other commands.
    SynthFeatures {
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = FEATURE_DIM)]
        dim: usize,
        #[arg(long, env = "NXF_SEED", default_value_t = 0)]
        seed: u64,
    },
}

fn model(
    preset: PresetArg,
    causal: bool,
    checkpoint: Option<&PathBuf>,
    seed: u64,
) -> Result<(Model, ParamStore)> {
    let mut cfg = ModelConfig::preset(preset.into());
    if causal {
        cfg = cfg.causal();
    }
    let (model, mut store) = Model::init(&cfg, seed)?;
    if let Some(path) = checkpoint {
        read_checkpoint(path, &mut store).with_context(|| format!("loading {}", path.display()))?;
    }
    Ok((model, store))
}

fn features(path: &PathBuf, normalize: bool) -> Result<Tensor> {
    read_features(path, normalize).with_context(|| format!("reading {}", path.display()))
}

fn describe(preset: PresetArg, cnn8: bool, frames: usize) -> Result<()> {
    let mut cfg = ModelConfig::preset(preset.into());
    if cnn8 {
        cfg = cfg.with_cnn8();
    }
    let params = count_params(&cfg);
    let flops = count_flops(&cfg, frames);
    println!("{:<24} {:>14} {:>16}", "module", "params", "flops");
    let mut names: Vec<&str> = params.breakdown.iter().map(|(n, _)| n.as_str()).collect();
    for (n, _) in &flops.breakdown {
        if !names.contains(&n.as_str()) {
            names.push(n);
        }
    }
    let find = |list: &[(String, u64)], name: &str| {
        list.iter()
            .find(|(n, _)| n == name)
            .map_or("-".to_string(), |(_, v)| v.to_string())
    };
    for name in names {
        println!(
            "{:<24} {:>14} {:>16}",
            name,
            find(&params.breakdown, name),
            find(&flops.breakdown, name)
        );
    }
    println!("{:<24} {:>14} {:>16}", "total", params.total, flops.total);
    println!();
    println!("preset={}{}", cfg.name, if cnn8 { "+cnn8" } else { "" });
    println!("params.total={}", params.total);
    println!("params.millions={:.2}", params.total as f64 / 1e6);
    println!("flops.total={}", flops.total);
    println!("flops.giga={:.2}", flops.total as f64 / 1e9);
    println!("flops.input_frames={}", flops.input_frames);
    for (i, s) in flops.stage_pointwise.iter().enumerate() {
        println!("flops.stage{i}_pointwise={s}");
    }
    println!("flops.convention={}", flops.convention);
    Ok(())
}

fn gradcheck(preset: PresetArg, frames: usize, eps: f64, tolerance: f64, seed: u64) -> Result<()> {
    let (model, store) = model(preset, false, None, seed)?;
    let n = store.element_count();
    ensure!(
        n <= GRADCHECK_MAX_PARAMS,
        "{} has {n} parameters; finite differences are limited to {GRADCHECK_MAX_PARAMS}",
        model.cfg.name
    );
    let mut rng = RandomSource::new(seed).split(1);
    let feats = Tensor::randn(&[frames, FEATURE_DIM], 1.0, &mut rng);
    let labels: Vec<usize> = (0..2)
        .map(|_| 1 + rng.below(model.cfg.vocab as u64 - 1) as usize)
        .collect();
    let report = grad_check_many(
        |xs| {
            let mut r = RandomSource::new(0);
            let mut p = Pass::from_vars(xs.to_vec(), Mode::Eval, &mut r);
            Ok(model
                .loss(&mut p, &Var::constant(feats.clone()), &labels)?
                .0)
        },
        &store.flatten()?,
        eps,
    )?;
    let (k, i) = report.worst;
    println!("gradcheck.preset={}", model.cfg.name);
    println!("gradcheck.coordinates={}", report.coordinates);
    println!("gradcheck.max_error={:e}", report.max_error);
    println!("gradcheck.worst={}[{i}]", store.entries()[k].name);
    println!("gradcheck.analytic={:e}", report.analytic);
    println!("gradcheck.numeric={:e}", report.numeric);
    ensure!(
        report.max_error < tolerance,
        "max error {:e} exceeds {tolerance:e}",
        report.max_error
    );
    println!("gradcheck.pass=true");
    Ok(())
}

struct ForwardArgs {
    preset: PresetArg,
    features: PathBuf,
    out: PathBuf,
    causal: bool,
    checkpoint: Option<PathBuf>,
    normalize: bool,
    seed: u64,
}

fn forward(a: ForwardArgs) -> Result<()> {
    let (model, store) = model(a.preset, a.causal, a.checkpoint.as_ref(), a.seed)?;
    let x = features(&a.features, a.normalize)?;
    let mut rng = RandomSource::new(a.seed);
    let mut p = Pass::new(&store, Mode::Eval, &mut rng, false)?;
    let h = model
        .encode(
            &mut p,
            &Var::constant(x.clone()),
            &ForwardOptions::default(),
        )?
        .h;
    write_features(&a.out, h.value()).with_context(|| format!("writing {}", a.out.display()))?;
    println!("forward.input_frames={}", x.shape()[0]);
    println!("forward.output_shape={}x{}", h.shape()[0], h.shape()[1]);
    Ok(())
}

fn stream_check(
    preset: PresetArg,
    chunk_ms: u32,
    path: &PathBuf,
    tolerance: f64,
    checkpoint: Option<&PathBuf>,
    seed: u64,
) -> Result<()> {
    ensure!(
        chunk_ms > 0 && chunk_ms.is_multiple_of(2 * FRAME_MS),
        "chunk of {chunk_ms} ms is not an even number of {FRAME_MS} ms frames"
    );
    let chunk = (chunk_ms / FRAME_MS) as usize;
    let (model, store) = model(preset, true, checkpoint, seed)?;
    let x = features(path, false)?;
    // Steps must be whole multiples of 8 input frames; drop a ragged tail.
    let t = x.shape()[0] / 8 * 8;
    ensure!(t >= 8, "need at least 8 frames, file has {}", x.shape()[0]);
    let x = x.slice_rows(0, t)?;
    let mut rng = RandomSource::new(seed);
    let mut p = Pass::new(&store, Mode::Eval, &mut rng, false)?;
    let opts = ForwardOptions {
        chunk: Some(ChunkSpec::Fixed { size: chunk }),
        valid_frames: None,
    };
    let full = model.encode(&mut p, &Var::constant(x.clone()), &opts)?.h;

    let enc = &model.encoder;
    let mut state = enc.start_stream(chunk)?;
    let step = enc.step_frames(&state);
    let mut outs = Vec::new();
    let mut start = 0;
    while start < t {
        let len = step.min(t - start);
        let y = enc.stream_step(
            &mut p,
            &Var::constant(x.slice_rows(start, len)?),
            &mut state,
        )?;
        outs.push(y.value().clone());
        start += len;
    }
    let streamed = Tensor::cat_rows(&outs)?;
    ensure!(
        streamed.shape() == full.shape(),
        "streamed shape {:?} differs from full pass {:?}",
        streamed.shape(),
        full.shape()
    );
    let dev = streamed.max_abs_diff(full.value())?;
    println!("stream.preset={}", model.cfg.name);
    println!("stream.chunk_frames={chunk}");
    println!("stream.input_frames={t}");
    println!("stream.steps={}", outs.len());
    println!("stream.output_frames={}", streamed.shape()[0]);
    println!("stream.max_abs_deviation={dev:e}");
    if dev > tolerance {
        bail!("deviation {dev:e} exceeds tolerance {tolerance:e}");
    }
    println!("stream.pass=true");
    Ok(())
}

fn train(
    steps: u64,
    seed: u64,
    schedule: ScheduleArg,
    log_every: u64,
    no_early_stop: bool,
) -> Result<()> {
    let mut cfg = ToyConfig::new(schedule.into(), steps, seed);
    cfg.stop_when_solved = !no_early_stop;
    let every = log_every.max(1);
    let report = train_toy(&cfg, |s| {
        if s.step == 1 || s.step % every == 0 {
            println!(
                "step={} epoch={} lr={:.6e} ctc={:.6} att={:.6} joint={:.6}",
                s.step, s.epoch, s.lr, s.ctc, s.att, s.joint
            );
        }
    })?;
    for e in &report.evals {
        println!(
            "eval step={} errors={} tokens={} ter={:.4}",
            e.step,
            e.errors,
            e.tokens,
            e.ter()
        );
    }
    println!("toy.steps_run={}", report.steps.len());
    match report.solved_at {
        Some(s) => println!("toy.solved_at={s}"),
        None => println!("toy.solved_at=none"),
    }
    Ok(())
}

fn schedule_dump(
    kind: ScheduleArg,
    epochs: u64,
    steps_per_epoch: u64,
    warmup_steps: u64,
    peak_lr: f64,
    per_step: bool,
) -> Result<()> {
    ensure!(steps_per_epoch > 0, "steps per epoch must be positive");
    let s = LrSchedule {
        warmup_steps,
        peak_lr,
        ..LrSchedule::new(kind.into())
    };
    println!("epoch,step,lr");
    for epoch in 1..=epochs {
        let last = epoch * steps_per_epoch;
        let first = if per_step {
            last - steps_per_epoch + 1
        } else {
            last
        };
        for step in first..=last {
            println!("{epoch},{step},{:e}", s.lr_at(step, epoch));
        }
    }
    Ok(())
}

fn synth(frames: usize, out: &PathBuf, dim: usize, seed: u64) -> Result<()> {
    let x =
        Tensor::randn(&[frames, dim], 1.0, &mut RandomSource::new(seed)).map(|v| v as f32 as f64);
    write_features(out, &x).with_context(|| format!("writing {}", out.display()))?;
    println!("synth.shape={frames}x{dim}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Describe {
            preset,
            cnn8,
            frames,
        } => describe(preset, cnn8, frames),
        Command::Gradcheck {
            preset,
            frames,
            eps,
            tolerance,
            seed,
        } => gradcheck(preset, frames, eps, tolerance, seed),
        Command::Forward {
            preset,
            features,
            out,
            causal,
            checkpoint,
            normalize,
            seed,
        } => forward(ForwardArgs {
            preset,
            features,
            out,
            causal,
            checkpoint,
            normalize,
            seed,
        }),
        Command::StreamCheck {
            preset,
            chunk_ms,
            features,
            tolerance,
            checkpoint,
            seed,
        } => stream_check(
            preset,
            chunk_ms,
            &features,
            tolerance,
            checkpoint.as_ref(),
            seed,
        ),
        Command::TrainToy {
            steps,
            seed,
            schedule,
            log_every,
            no_early_stop,
        } => train(steps, seed, schedule, log_every, no_early_stop),
        Command::ScheduleDump {
            schedule,
            epochs,
            steps_per_epoch,
            warmup_steps,
            peak_lr,
            per_step,
        } => schedule_dump(
            schedule,
            epochs,
            steps_per_epoch,
            warmup_steps,
            peak_lr,
            per_step,
        ),
        Command::SynthFeatures {
            frames,
            out,
            dim,
            seed,
        } => synth(frames, &out, dim, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
