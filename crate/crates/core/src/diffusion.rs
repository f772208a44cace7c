//! Training batches and the noise-prediction objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::data::generate::Sample;
use crate::error::{Error, Result};
use crate::model::{Denoiser, ModelInput, Routing};
use crate::params::Bound;
use crate::schedule::{forward_noise_batch, NoiseSchedule};
use crate::task::{list_tasks, TaskId};
use crate::tensor::{Float, Tensor};

/// Probability of replacing a condition by its null value during training.
pub const DEFAULT_COND_DROPOUT: f64 = 0.1;

/// Everything one loss evaluation needs for a single task.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBatch<F: Float> {
    pub task: TaskId,
    /// Clean latents `[B, c, H, W]`.
    pub z0: Tensor<F>,
    /// Prompt tokens, `B * text_len`.
    pub text: Vec<usize>,
    /// Condition images `[B, c, H, W]`, present iff the task is image-conditioned.
    pub cond: Option<Tensor<F>>,
    pub t: Vec<usize>,
    pub eps: Tensor<F>,
}

impl<F: Float> ConditioningBatch<F> {
    pub fn new(
        task: TaskId,
        z0: Tensor<F>,
        text: Vec<usize>,
        cond: Option<Tensor<F>>,
        t: Vec<usize>,
        eps: Tensor<F>,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        if cond.is_some() != task.image_conditioned() {
            return Err(Error::Data(format!(
                "{task} batch {} a condition image",
                if cond.is_some() { "must not carry" } else { "needs" }
            )));
        }
        let b = z0.shape().first().copied().unwrap_or(0);
        if b == 0 || t.len() != b || eps.shape() != z0.shape() || cond.as_ref().is_some_and(|c| c.shape() != z0.shape()) {
            return Err(Error::Shape(format!("inconsistent batch: z0 {:?}, {} timesteps", z0.shape(), t.len())));
        }
        if !text.len().is_multiple_of(b) {
            return Err(Error::Shape(format!("{} prompt tokens for batch {b}", text.len())));
        }
        for &ti in &t {
            schedule.check_timestep(ti)?;
        }
        Ok(ConditioningBatch { task, z0, text, cond, t, eps })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Options for turning samples into a batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchOptions {
    /// Independent drop probability for the prompt and the condition image.
    pub cond_dropout: f64,
    pub null_token: usize,
}

pub(crate) fn stack_images<F: Float>(images: &[&Tensor<f32>]) -> Tensor<F> {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    let data = images.iter().flat_map(|t| t.data().iter().map(|&v| F::from_f64(v as f64))).collect();
    Tensor::new(shape, data).expect("images share a shape")
}

/// Draws timesteps, noise and condition dropout for `samples` from `rng`.
pub fn make_batch<F: Float>(
    task: TaskId,
    samples: &[&Sample],
    schedule: &NoiseSchedule,
    opts: BatchOptions,
    rng: &mut ChaCha8Rng,
) -> Result<ConditioningBatch<F>> {
    if samples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.task != task) {
        return Err(Error::Data(format!("{} sample in a {task} batch", s.task)));
    }
    let z0: Tensor<F> = stack_images(&samples.iter().map(|s| &s.target).collect::<Vec<_>>());
    let mut cond: Option<Tensor<F>> = if task.image_conditioned() {
        let imgs = samples
            .iter()
            .map(|s| s.cond.as_ref().ok_or_else(|| Error::Data(format!("{task} sample {} lacks a condition", s.index))))
            .collect::<Result<Vec<_>>>()?;
        Some(stack_images(&imgs))
    } else {
        None
    };
    let per = z0.numel() / samples.len();
    let mut text = Vec::with_capacity(samples.len() * samples[0].prompt.len());
    let mut t = Vec::with_capacity(samples.len());
    for (b, s) in samples.iter().enumerate() {
        t.push(rng.random_range(1..=schedule.timesteps()));
        if rng.random_bool(opts.cond_dropout) {
            text.extend(std::iter::repeat_n(opts.null_token, s.prompt.len()));
        } else {
            text.extend_from_slice(&s.prompt);
        }
        let drop_image = rng.random_bool(opts.cond_dropout);
        if let (Some(c), true) = (cond.as_mut(), drop_image) {
            c.data_mut()[b * per..(b + 1) * per].fill(F::zero());
        }
    }
    let eps = Tensor::randn(z0.shape(), 1.0, rng);
    ConditioningBatch::new(task, z0, text, cond, t, eps, schedule)
}

/// Same batch as [`make_batch`] with a seed and no dropout, for evaluation.
pub fn eval_batch<F: Float>(
    task: TaskId,
    samples: &[&Sample],
    schedule: &NoiseSchedule,
    null_token: usize,
    seed: u64,
) -> Result<ConditioningBatch<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_batch(task, samples, schedule, BatchOptions { cond_dropout: 0.0, null_token }, &mut rng)
}

/// Mean squared error between `eps` and the model's prediction, averaged
/// over every element of the batch.
pub fn diffusion_loss<'t, F: Float>(
    model: &Denoiser<F>,
    bound: &Bound<'t, '_, F>,
    batch: &ConditioningBatch<F>,
    schedule: &NoiseSchedule,
    routing: Routing<'_, F>,
) -> Result<Var<'t, F>> {
    let z_t = forward_noise_batch(&batch.z0, &batch.eps, &batch.t, schedule)?;
    let input = ModelInput {
        z_t: &z_t,
        cond_image: batch.cond.as_ref(),
        text: &batch.text,
        t: &batch.t,
        task: Some(batch.task),
    };
    let eps_hat = model.forward(bound, &input, routing)?;
    eps_hat.mse(&bound.tape().constant(&batch.eps)?)
}

/// Sum of per-task diffusion losses, one batch per registered task.
pub fn mtu_loss<'t, F: Float>(
    model: &Denoiser<F>,
    bound: &Bound<'t, '_, F>,
    batches: &[ConditioningBatch<F>],
    schedule: &NoiseSchedule,
) -> Result<(Var<'t, F>, Vec<(TaskId, f64)>)> {
    let layout = model.mtu.as_ref().ok_or_else(|| Error::Config("multi-task loss needs an upcycled model".into()))?;
    for b in batches {
        layout.check_task(b.task)?;
    }
    let mut total: Option<Var<'t, F>> = None;
    let mut per_task = Vec::with_capacity(layout.tasks.len());
    for &task in &layout.tasks {
        let mut of_task = batches.iter().filter(|b| b.task == task);
        let batch = of_task.next().ok_or_else(|| Error::MissingTask(task.to_string()))?;
        if of_task.next().is_some() {
            return Err(Error::Data(format!("more than one batch for {task} (registered: {})", list_tasks(&layout.tasks))));
        }
        let l = diffusion_loss(model, bound, batch, schedule, Routing::OnTheFly)?;
        per_task.push((task, l.item().as_f64()));
        total = Some(match total {
            None => l,
            Some(acc) => acc.add(&l)?,
        });
    }
    Ok((total.expect("at least one registered task"), per_task))
}
