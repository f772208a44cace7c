//! Training loops for pretraining, single-task fine-tuning, component
//! fine-tuning and multi-task MTU training.
//!
//! Each step's data (batch indices, timesteps, noise, dropout) comes from a
//! ChaCha stream keyed by `(seed, step, task)`, so a run resumed from a
//! saved step continues exactly as the uninterrupted run would.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::data::generate::Sample;
use crate::diffusion::{diffusion_loss, eval_batch, make_batch, mtu_loss, BatchOptions, ConditioningBatch, DEFAULT_COND_DROPOUT};
use crate::error::{Error, Result};
use crate::model::{expand_conv_channels, Denoiser, Routing};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{BindMode, Bound, Component, ComponentClass};
use crate::schedule::NoiseSchedule;
use crate::task::TaskId;
use crate::tensor::Float;
use crate::upcycle::TaskWeightCache;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub cond_dropout: f64,
    pub optim: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 3000, batch_size: 8, seed: 0, cond_dropout: DEFAULT_COND_DROPOUT, optim: AdamWConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("cond_dropout {} outside [0, 1]", self.cond_dropout)));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.optim.lr)));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub losses: Vec<(TaskId, f64)>,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_secs: f64,
}

/// Training data for one task.
#[derive(Clone, Copy, Debug)]
pub struct TaskData<'a> {
    pub task: TaskId,
    pub samples: &'a [Sample],
}

/// Per-step RNG for one task.
pub fn step_rng(seed: u64, step: usize, task: TaskId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 * 8 + task.index() as u64);
    rng
}

pub struct Trainer<F: Float> {
    pub model: Denoiser<F>,
    pub opt: AdamW<F>,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    null_token: usize,
    /// Completed steps.
    step: usize,
    started: Instant,
}

fn data_for<'a>(data: &[TaskData<'a>], task: TaskId) -> Result<&'a [Sample]> {
    let d = data.iter().find(|d| d.task == task).ok_or_else(|| Error::MissingTask(task.to_string()))?;
    if d.samples.is_empty() {
        return Err(Error::Data(format!("no {task} training samples")));
    }
    Ok(d.samples)
}

impl<F: Float> Trainer<F> {
    pub fn new(model: Denoiser<F>, config: TrainConfig, null_token: usize) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::linear(model.config.timesteps)?;
        let opt = AdamW::new(config.optim.clone());
        Ok(Trainer { model, opt, config, schedule, null_token, step: 0, started: Instant::now() })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn batch(&self, task: TaskId, samples: &[Sample], step: usize) -> Result<ConditioningBatch<F>> {
        let mut rng = step_rng(self.config.seed, step, task);
        let picks: Vec<&Sample> =
            (0..self.config.batch_size).map(|_| &samples[rng.random_range(0..samples.len())]).collect();
        let opts = BatchOptions { cond_dropout: self.config.cond_dropout, null_token: self.null_token };
        make_batch(task, &picks, &self.schedule, opts, &mut rng)
    }

    /// Tasks trained by this model: every registered task for MTU models,
    /// otherwise the single task in `data`.
    fn tasks(&self, data: &[TaskData<'_>]) -> Result<Vec<TaskId>> {
        match &self.model.mtu {
            Some(m) => Ok(m.tasks.clone()),
            None => match data {
                [one] => Ok(vec![one.task]),
                _ => Err(Error::Config(format!("a dense model trains one task at a time, got {}", data.len()))),
            },
        }
    }

    /// Runs one optimizer step.
    pub fn train_step(&mut self, data: &[TaskData<'_>]) -> Result<StepRecord> {
        let step = self.step + 1;
        let tasks = self.tasks(data)?;
        let batches = tasks
            .iter()
            .map(|&t| self.batch(t, data_for(data, t)?, step))
            .collect::<Result<Vec<_>>>()?;
        let tape = Tape::new();
        let bound = Bound::new(&tape, &self.model.params, BindMode::Train);
        let (loss, losses) = if self.model.is_mtu() {
            mtu_loss(&self.model, &bound, &batches, &self.schedule)?
        } else {
            let l = diffusion_loss(&self.model, &bound, &batches[0], &self.schedule, Routing::OnTheFly)?;
            let v = l.item().as_f64();
            (l, vec![(tasks[0], v)])
        };
        let grads = tape.backward(loss)?;
        let named = bound.collect_grads(&grads);
        drop(bound);
        let stats = self.opt.step(&mut self.model.params, &named)?;
        self.step = step;
        Ok(StepRecord {
            step,
            losses,
            lr: self.opt.config.lr,
            grad_norm: stats.grad_norm,
            wall_secs: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `config.steps` steps are done, calling `on_step` after each.
    pub fn run(&mut self, data: &[TaskData<'_>], mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        self.run_until(data, self.config.steps, &mut on_step)
    }

    pub fn run_until(
        &mut self,
        data: &[TaskData<'_>],
        until: usize,
        on_step: &mut impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let rec = self.train_step(data)?;
            on_step(&rec)?;
        }
        Ok(())
    }

    /// Writes `<stem>.ckpt` and `<stem>.opt`; returns the checkpoint path.
    pub fn save(&self, stem: &Path) -> Result<PathBuf> {
        let ckpt = stem.with_extension("ckpt");
        checkpoint::save(
            &self.model,
            &ckpt,
            &[("step", self.step.to_string()), ("seed", self.config.seed.to_string())],
        )?;
        self.opt.save(&optimizer_path(&ckpt))?;
        Ok(ckpt)
    }

    /// Restores a trainer saved by [`Trainer::save`]. `config.steps` may
    /// differ from the original run; the seed must match for exact replay.
    pub fn resume(ckpt: &Path, config: TrainConfig, null_token: usize) -> Result<Self> {
        let loaded = checkpoint::load::<F>(ckpt)?;
        let step = loaded
            .meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("{}: no training step recorded", ckpt.display())))?;
        let mut t = Trainer::new(loaded.model, config, null_token)?;
        t.opt = AdamW::load(&optimizer_path(ckpt))?;
        t.opt.set_lr(t.config.optim.lr);
        t.step = step;
        Ok(t)
    }
}

/// Optimizer state lives next to the checkpoint.
pub fn optimizer_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("opt")
}

/// Dense model ready for single-task fine-tuning: image-conditioned tasks get
/// an input conv widened to `2c` with zero-initialized extra channels.
pub fn prepare_finetune<F: Float>(pretrained: &Denoiser<F>, task: TaskId) -> Result<Denoiser<F>> {
    if pretrained.is_mtu() {
        return Err(Error::Config("single-task fine-tuning starts from a dense model".into()));
    }
    let mut m = pretrained.clone();
    let c = m.config.channels;
    let w = m.params.get_mut("input_conv.weight")?;
    let cin = w.tensor.shape()[1];
    match (task.input_channels(c), cin) {
        (want, have) if want == have => {}
        (want, have) if want == 2 * have => w.tensor = expand_conv_channels(&w.tensor, c)?,
        (want, have) => {
            return Err(Error::Shape(format!("cannot adapt a {have}-channel input conv to {task} ({want} channels)")))
        }
    }
    m.params.set_frozen(|_, _| false);
    Ok(m)
}

/// Fine-tuning that trains a single component class. The input conv stays
/// trainable so the condition channels can be learned.
pub fn prepare_component_ft<F: Float>(pretrained: &Denoiser<F>, task: TaskId, class: ComponentClass) -> Result<Denoiser<F>> {
    let mut m = prepare_finetune(pretrained, task)?;
    m.params.set_frozen(|_, e| !(e.component.class() == Some(class) || e.component == Component::InputConv));
    Ok(m)
}

/// Mean per-element noise-prediction error over `samples`, with timesteps
/// and noise fixed by `seed`.
pub fn validation_loss<F: Float>(
    model: &Denoiser<F>,
    task: TaskId,
    samples: &[Sample],
    null_token: usize,
    seed: u64,
    chunk: usize,
) -> Result<f64> {
    if samples.is_empty() || chunk == 0 {
        return Err(Error::Data("validation needs samples and a positive chunk size".into()));
    }
    let schedule = NoiseSchedule::linear(model.config.timesteps)?;
    let cache = if model.is_mtu() { Some(TaskWeightCache::build(model)?) } else { None };
    let routing = cache.as_ref().map_or(Routing::OnTheFly, Routing::Cached);
    let mut total = 0.0;
    for (i, part) in samples.chunks(chunk).enumerate() {
        let refs: Vec<&Sample> = part.iter().collect();
        let batch = eval_batch::<F>(task, &refs, &schedule, null_token, seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))?;
        let tape = Tape::new();
        let bound = Bound::new(&tape, &model.params, BindMode::Inference);
        let l = diffusion_loss(model, &bound, &batch, &schedule, routing)?.item().as_f64();
        total += l * part.len() as f64;
    }
    Ok(total / samples.len() as f64)
}
