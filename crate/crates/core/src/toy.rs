//! A synthetic recognition task small enough to memorize, and the training
//! loop that memorizes it.

use serde::Serialize;

use crate::autograd::Var;
use crate::config::{ModelConfig, Preset, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Mode, Pass};
use crate::optim::Adam;
use crate::rng::RandomSource;
use crate::schedule::{LrSchedule, ScheduleKind};
use crate::tensor::Tensor;

pub const TOY_UTTERANCES: usize = 20;
pub const TOY_VOCAB: usize = 8;

#[derive(Clone, Debug)]
pub struct Utterance {
    pub feats: Tensor,
    pub labels: Vec<usize>,
}

/// Spectral signature of label `k`: a sinusoid over frequency bins.
fn signature(k: usize, bin: usize) -> f64 {
    let x = bin as f64 / FEATURE_DIM as f64;
    (std::f64::consts::TAU * (k as f64 * 1.5 * x) + k as f64).sin()
}

/// 20 utterances of 80–160 frames with 2–5 labels from `1..8`. Each label
/// occupies an equal share of the frames, with its signature over noise.
pub fn toy_dataset(seed: u64) -> Vec<Utterance> {
    let mut rng = RandomSource::new(seed).split(0x70_79);
    (0..TOY_UTTERANCES)
        .map(|_| {
            let t = 80 + rng.below(81) as usize;
            let n = 2 + rng.below(4) as usize;
            let labels: Vec<usize> = (0..n)
                .map(|_| 1 + rng.below(TOY_VOCAB as u64 - 1) as usize)
                .collect();
            let seg = t / n;
            let mut data = Vec::with_capacity(t * FEATURE_DIM);
            for frame in 0..t {
                let s = (frame / seg).min(n - 1);
                // A quiet gap at each segment start separates repeated labels.
                let active = frame - s * seg >= 3;
                for bin in 0..FEATURE_DIM {
                    let sig = if active {
                        signature(labels[s], bin)
                    } else {
                        0.0
                    };
                    data.push(sig + 0.3 * rng.normal());
                }
            }
            Utterance {
                feats: Tensor::from_parts(vec![t, FEATURE_DIM], data),
                labels,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ToyConfig {
    pub steps: u64,
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub steps_per_epoch: u64,
    pub decay_start_epoch: u64,
    pub eval_every: u64,
    /// Stop at the first evaluation with no token errors.
    pub stop_when_solved: bool,
}

impl ToyConfig {
    pub fn new(schedule: ScheduleKind, steps: u64, seed: u64) -> Self {
        Self {
            steps,
            seed,
            schedule,
            batch: 4,
            peak_lr: 3e-3,
            warmup_steps: 200,
            steps_per_epoch: 100,
            decay_start_epoch: 16,
            eval_every: 50,
            stop_when_solved: true,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            kind: self.schedule,
            warmup_steps: self.warmup_steps,
            peak_lr: self.peak_lr,
            decay_ratio: 0.6,
            decay_start_epoch: self.decay_start_epoch,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::preset(Preset::NextformerXs).without_regularization();
        cfg.vocab = TOY_VOCAB;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub ctc: f64,
    pub att: f64,
    pub joint: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalLog {
    pub step: u64,
    pub errors: usize,
    pub tokens: usize,
}

impl EvalLog {
    pub fn ter(&self) -> f64 {
        self.errors as f64 / self.tokens.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyReport {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    pub solved_at: Option<u64>,
}

pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Greedy-decode every utterance and count token edits against the labels.
pub fn evaluate(
    model: &Model,
    store: &crate::nn::ParamStore,
    data: &[Utterance],
    step: u64,
) -> Result<EvalLog> {
    let mut rng = RandomSource::new(0);
    let mut p = Pass::new(store, Mode::Eval, &mut rng, false)?;
    let mut errors = 0;
    let mut tokens = 0;
    for u in data {
        let hyp = model.recognize(&mut p, &Var::constant(u.feats.clone()))?;
        errors += edit_distance(&hyp, &u.labels);
        tokens += u.labels.len();
    }
    Ok(EvalLog {
        step,
        errors,
        tokens,
    })
}

/// Train the XS model on the toy set. `on_step` sees every log line.
pub fn train_toy(cfg: &ToyConfig, mut on_step: impl FnMut(&StepLog)) -> Result<ToyReport> {
    let data = toy_dataset(cfg.seed);
    let (model, mut store) = Model::init(&cfg.model_config(), cfg.seed)?;
    let mut adam = Adam::new(&store).with_clip(5.0);
    let sched = cfg.lr_schedule();
    let mut rng = RandomSource::new(cfg.seed).split(0x7261_696e);
    let mut report = ToyReport {
        steps: Vec::new(),
        evals: Vec::new(),
        solved_at: None,
    };
    let batch = cfg.batch.clamp(1, data.len());
    for step in 1..=cfg.steps {
        let epoch = (step - 1) / cfg.steps_per_epoch.max(1) + 1;
        let lr = sched.lr_at(step, epoch);
        let diverged = |e: Error| Error::Diverged {
            step,
            source: Box::new(e),
        };
        let mut p = Pass::new(&store, Mode::Train, &mut rng, true)?;
        let mut grads: Option<Vec<Tensor>> = None;
        let (mut ctc, mut att, mut joint) = (0.0, 0.0, 0.0);
        for k in 0..batch {
            let u = &data[((step as usize - 1) * batch + k) % data.len()];
            let (loss, b) = model
                .loss(&mut p, &Var::constant(u.feats.clone()), &u.labels)
                .map_err(diverged)?;
            let g = p.param_grads(&loss.backward().map_err(diverged)?);
            grads = Some(match grads {
                None => g,
                Some(acc) => acc
                    .iter()
                    .zip(&g)
                    .map(|(a, b)| Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]))
                    .collect(),
            });
            ctc += b.l_ctc / batch as f64;
            att += b.l_att / batch as f64;
            joint += b.l_joint / batch as f64;
        }
        drop(p);
        let grads: Vec<Tensor> = grads
            .unwrap_or_default()
            .iter()
            .map(|g| g.map(|x| x / batch as f64))
            .collect();
        adam.step(&mut store, &grads, lr)
            .map_err(|e| Error::Diverged {
                step,
                source: Box::new(e),
            })?;
        let log = StepLog {
            step,
            epoch,
            lr,
            ctc,
            att,
            joint,
        };
        on_step(&log);
        report.steps.push(log);
        if step % cfg.eval_every.max(1) == 0 || step == cfg.steps {
            let ev = evaluate(&model, &store, &data, step)?;
            let solved = ev.errors == 0;
            report.evals.push(ev);
            if solved && report.solved_at.is_none() {
                report.solved_at = Some(step);
                if cfg.stop_when_solved {
                    break;
                }
            }
        }
    }
    Ok(report)
}
