//! Deterministic DDIM sampling with text and image classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Denoiser, ModelInput, Routing};
use crate::schedule::NoiseSchedule;
use crate::task::TaskId;
use crate::tensor::{Float, Tensor};

/// Guidance scales. `image` applies only to image-conditioned tasks and
/// defaults to 1 there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Guidance {
    pub text: f64,
    pub image: Option<f64>,
}

impl Default for Guidance {
    fn default() -> Self {
        Guidance { text: 1.0, image: None }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SamplerOptions {
    pub steps: usize,
    pub guidance: Guidance,
    pub null_token: usize,
    /// Clamp the predicted clean image to `[-1, 1]` at every step.
    pub clip_x0: bool,
}

/// A batch of generation requests for one task.
#[derive(Clone, Copy, Debug)]
pub struct SampleRequest<'a, F> {
    pub task: TaskId,
    /// `B * text_len` prompt tokens.
    pub text: &'a [usize],
    /// `[B, c, H, W]` condition images for image-conditioned tasks.
    pub cond: Option<&'a Tensor<F>>,
    /// One seed per example; each example's starting noise depends only on its seed.
    pub seeds: &'a [u64],
}

/// Starting latent for one example.
pub fn initial_noise<F: Float>(shape: &[usize], seed: u64) -> Tensor<F> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Scales resolved against a task; errors on an image scale for a text-only task.
fn resolve(task: TaskId, g: Guidance) -> Result<(f64, Option<f64>)> {
    match (task.image_conditioned(), g.image) {
        (false, Some(_)) => Err(Error::Config(format!("{task} has no image condition to guide"))),
        (false, None) => Ok((g.text, None)),
        (true, s) => Ok((g.text, Some(s.unwrap_or(1.0)))),
    }
}

/// `a + s (b - a)` elementwise.
fn extrapolate<F: Float>(a: &[F], b: &[F], s: F) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| x + s * (y - x)).collect()
}

/// Guided noise prediction at timestep `t` for every example in the batch.
pub fn guided_eps<F: Float>(
    model: &Denoiser<F>,
    req: &SampleRequest<'_, F>,
    z: &Tensor<F>,
    t: usize,
    opts: &SamplerOptions,
    routing: Routing<'_, F>,
) -> Result<Tensor<F>> {
    let (s_t, s_i) = resolve(req.task, opts.guidance)?;
    let batch = req.seeds.len();
    let ts = vec![t; batch];
    let null_text = vec![opts.null_token; req.text.len()];
    let run = |text: &[usize], cond: Option<&Tensor<F>>| {
        model.predict(&ModelInput { z_t: z, cond_image: cond, text, t: &ts, task: Some(req.task) }, routing)
    };
    let shape = z.shape().to_vec();
    match (s_i, req.cond) {
        (None, None) => {
            let full = run(req.text, None)?;
            if s_t == 1.0 {
                return Ok(full);
            }
            let uncond = run(&null_text, None)?;
            Tensor::new(shape, extrapolate(uncond.data(), full.data(), F::from_f64(s_t)))
        }
        (Some(s_i), Some(cond)) => {
            let full = run(req.text, Some(cond))?;
            if s_t == 1.0 && s_i == 1.0 {
                return Ok(full);
            }
            let null_image = Tensor::zeros(cond.shape());
            let image_only = run(&null_text, Some(cond))?;
            let uncond = run(&null_text, Some(&null_image))?;
            let (st, si) = (F::from_f64(s_t), F::from_f64(s_i));
            let out = uncond
                .data()
                .iter()
                .zip(image_only.data())
                .zip(full.data())
                .map(|((&u, &i), &f)| u + si * (i - u) + st * (f - i))
                .collect();
            Tensor::new(shape, out)
        }
        (None, Some(_)) => Err(Error::Data(format!("{} takes no condition image", req.task))),
        (Some(_), None) => Err(Error::Data(format!("{} needs a condition image", req.task))),
    }
}

/// One deterministic DDIM update from `t` to `t_prev` (`t_prev = 0` yields the clean estimate).
pub fn ddim_step<F: Float>(z: &[F], eps: &[F], a_t: f64, a_prev: f64, clip_x0: bool) -> Vec<F> {
    let inv_sqrt_a = F::from_f64(1.0 / a_t.sqrt());
    let noise_t = F::from_f64((1.0 - a_t).sqrt());
    let sqrt_prev = F::from_f64(a_prev.sqrt());
    let noise_prev = F::from_f64((1.0 - a_prev).sqrt());
    let (lo, hi) = (F::from_f64(-1.0), F::one());
    z.iter()
        .zip(eps)
        .map(|(&z, &e)| {
            let mut x0 = (z - noise_t * e) * inv_sqrt_a;
            if clip_x0 {
                x0 = x0.max(lo).min(hi);
            }
            sqrt_prev * x0 + noise_prev * e
        })
        .collect()
}

/// Runs the sampler and returns images `[B, c, H, W]`.
pub fn sample<F: Float>(
    model: &Denoiser<F>,
    schedule: &NoiseSchedule,
    req: &SampleRequest<'_, F>,
    opts: &SamplerOptions,
    routing: Routing<'_, F>,
) -> Result<Tensor<F>> {
    let cfg = &model.config;
    if schedule.timesteps() != cfg.timesteps {
        return Err(Error::Config(format!(
            "schedule has {} steps, model was built for {}",
            schedule.timesteps(),
            cfg.timesteps
        )));
    }
    let batch = req.seeds.len();
    if batch == 0 || req.text.len() != batch * cfg.text_len {
        return Err(Error::Shape(format!("{} seeds with {} prompt tokens", batch, req.text.len())));
    }
    resolve(req.task, opts.guidance)?;
    let per_shape = [cfg.channels, cfg.image_size, cfg.image_size];
    let mut data = Vec::with_capacity(batch * per_shape.iter().product::<usize>());
    for &seed in req.seeds {
        data.extend(initial_noise::<F>(&per_shape, seed).into_data());
    }
    let shape = vec![batch, per_shape[0], per_shape[1], per_shape[2]];
    let mut z = Tensor::new(shape.clone(), data)?;
    let ts = schedule.sub_schedule(opts.steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = guided_eps(model, req, &z, t, opts, routing)?;
        let next = ddim_step(z.data(), eps.data(), schedule.alpha_bar(t), schedule.alpha_bar(t_prev), opts.clip_x0);
        z = Tensor::new(shape.clone(), next)?;
        if !z.is_finite() {
            return Err(Error::NonFinite("sampler"));
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DenoiserConfig;

    fn opts(steps: usize, guidance: Guidance) -> SamplerOptions {
        SamplerOptions { steps, guidance, null_token: 0, clip_x0: true }
    }

    #[test]
    fn image_scale_rejected_for_text_only() {
        let cfg = DenoiserConfig::tiny();
        let m = Denoiser::<f64>::new_dense(cfg.clone(), 0).unwrap();
        let s = NoiseSchedule::linear(cfg.timesteps).unwrap();
        let text = vec![1; cfg.text_len];
        let req = SampleRequest { task: TaskId::T2I, text: &text, cond: None, seeds: &[1] };
        let err = sample(&m, &s, &req, &opts(4, Guidance { text: 2.0, image: Some(1.5) }), Routing::OnTheFly);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn unit_text_scale_matches_conditional_prediction() {
        let cfg = DenoiserConfig::tiny();
        let m = Denoiser::<f64>::new_dense(cfg.clone(), 2).unwrap();
        let text: Vec<usize> = (0..cfg.text_len).map(|i| i + 3).collect();
        let z = initial_noise::<f64>(&[1, cfg.channels, cfg.image_size, cfg.image_size], 4);
        let req = SampleRequest { task: TaskId::T2I, text: &text, cond: None, seeds: &[0] };
        let g = guided_eps(&m, &req, &z, 7, &opts(1, Guidance::default()), Routing::OnTheFly).unwrap();
        let direct = m
            .predict(&ModelInput { z_t: &z, cond_image: None, text: &text, t: &[7], task: Some(TaskId::T2I) }, Routing::OnTheFly)
            .unwrap();
        assert_eq!(g.data(), direct.data());
    }

    #[test]
    fn ddim_to_zero_returns_clean_estimate() {
        let z = [0.5f64, -0.2];
        let e = [0.1f64, 0.3];
        let a = 0.64;
        let out = ddim_step(&z, &e, a, 1.0, false);
        for i in 0..2 {
            assert!((out[i] - (z[i] - 0.6 * e[i]) / 0.8).abs() < 1e-15);
        }
    }
}
