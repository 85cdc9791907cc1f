use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::SequenceTensors;
use crate::error::{Error, Result};
use crate::model::{Localizer, Recurrence};
use crate::train::{clip_grad_norm, step_loss, AdamW, AdamWConfig, LossWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps.
    pub steps: usize,
    /// Sequences per step in the single-frame phase; one random frame each.
    pub batch_size: usize,
    /// Frames per sequence in the sequential phase (the first `seq_len` are used).
    pub seq_len: usize,
    pub loss: LossWeights,
    pub optim: AdamWConfig,
    pub clip_norm: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

/// Learning-rate multiplier over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the configured rates down to zero at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps.max(1) as f64).cos()),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100,
            batch_size: 4,
            seq_len: 6,
            loss: LossWeights::default(),
            optim: AdamWConfig::default(),
            clip_norm: 1.0,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::config("batch_size and seq_len must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        self.loss.validate()?;
        self.optim.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_mse: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    /// Sequences left out because they were too short.
    pub skipped: usize,
}

/// Endless epoch-shuffled stream of indices.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

struct Accum {
    total: Vec<Var>,
    cls: f64,
    mse: f64,
}

fn optimize(
    model: &mut Localizer,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    step: usize,
    build: impl FnOnce(&Localizer, &mut Graph) -> Result<Accum>,
) -> Result<LogRecord> {
    let (loss, cls, mse, mut grads) = {
        let mut g = Graph::with_params(&model.params);
        let acc = build(model, &mut g)?;
        let n = acc.total.len() as f64;
        let stacked = g.concat(&acc.total, 0)?;
        let loss = g.mean(stacked);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss is {value} at step {step}")));
        }
        g.backward(loss)?;
        (value, acc.cls / n, acc.mse / n, g.param_grads())
    };
    clip_grad_norm(&mut grads, cfg.clip_norm);
    let factor = cfg.lr_schedule.factor(step, cfg.steps);
    opt.config.lr_other = cfg.optim.lr_other * factor;
    opt.config.lr_extractor = cfg.optim.lr_extractor * factor;
    opt.step(&mut model.params, &grads)?;
    Ok(LogRecord {
        step,
        loss,
        loss_cls: cls,
        loss_mse: mse,
        lr: opt.config.lr_other,
    })
}

fn summarize(records: &[LogRecord], skipped: usize) -> TrainSummary {
    TrainSummary {
        steps: records.len(),
        first_loss: records.first().map_or(f64::NAN, |r| r.loss),
        last_loss: records.last().map_or(f64::NAN, |r| r.loss),
        skipped,
    }
}

/// Single-frame phase: each step draws `batch_size` sequences and one random
/// frame from each; the temporal block is not involved.
pub fn train_baseline(
    model: &mut Localizer,
    data: &[SequenceTensors],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let usable: Vec<&SequenceTensors> = data.iter().filter(|s| !s.frames.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut sampler = Sampler::new(usable.len(), cfg.seed);
    let mut frame_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f4a3);
    let mut opt = AdamW::new(cfg.optim);
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let s = sampler.next();
                (s, frame_rng.random_range(0..usable[s].frames.len()))
            })
            .collect();
        let rec = optimize(model, &mut opt, cfg, step, |model, g| {
            let mut acc = Accum {
                total: Vec::new(),
                cls: 0.0,
                mse: 0.0,
            };
            for &(s, f) in &batch {
                let seq = usable[s];
                let sat = model.encode_satellite(g, &seq.satellite)?;
                let out = model.step(g, sat, &seq.frames[f], None, Recurrence::Independent)?;
                let l = step_loss(g, &out.heads, seq.gt_pixels[f], &model.config, &cfg.loss)?;
                acc.cls += g.value(l.cls).data()[0];
                acc.mse += g.value(l.mse).data()[0];
                acc.total.push(l.total);
            }
            Ok(acc)
        })?;
        log(&rec);
        records.push(rec);
    }
    Ok(summarize(&records, 0))
}

/// Sequential phase: extractors frozen, one sequence per step, the loss is
/// averaged over the first `seq_len` frames and backpropagated through the
/// hidden-state recurrence. With [`Recurrence::Independent`] the same
/// schedule trains a model that never uses its temporal block.
pub fn train_sequential(
    model: &mut Localizer,
    data: &[SequenceTensors],
    cfg: &TrainConfig,
    recurrence: Recurrence,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut usable = Vec::new();
    let mut skipped = 0;
    for s in data {
        if s.frames.len() < cfg.seq_len {
            log::warn!(
                "sequence {} has {} frames, fewer than {}; skipped",
                s.seq_id,
                s.frames.len(),
                cfg.seq_len
            );
            skipped += 1;
        } else {
            usable.push(s);
        }
    }
    if usable.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    model.params.set_extractor_frozen(true);
    let mut sampler = Sampler::new(usable.len(), cfg.seed);
    let mut opt = AdamW::new(cfg.optim);
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seq = usable[sampler.next()];
        let t = cfg.seq_len;
        let rec = optimize(model, &mut opt, cfg, step, |model, g| {
            let outs = model.run_sequence(g, &seq.satellite, &seq.frames[..t], recurrence)?;
            let mut acc = Accum {
                total: Vec::new(),
                cls: 0.0,
                mse: 0.0,
            };
            for (out, &gt) in outs.iter().zip(&seq.gt_pixels) {
                let l = step_loss(g, &out.heads, gt, &model.config, &cfg.loss)?;
                acc.cls += g.value(l.cls).data()[0];
                acc.mse += g.value(l.mse).data()[0];
                acc.total.push(l.total);
            }
            Ok(acc)
        })?;
        log(&rec);
        records.push(rec);
    }
    Ok(summarize(&records, skipped))
}
