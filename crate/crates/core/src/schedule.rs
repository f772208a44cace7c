//! Noise schedule and forward noising.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Cumulative signal fractions `a_0 = 1 > a_1 > ... > a_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    a: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas rise linearly; the endpoints are the usual 1e-4..0.02 rescaled by
    /// `1000 / T` so that `a_T` reaches ~1e-5 for short schedules too.
    pub fn linear(timesteps: usize) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Config(format!("need at least 2 timesteps, got {timesteps}")));
        }
        let scale = 1000.0 / timesteps as f64;
        let (lo, hi) = (1e-4 * scale, (0.02 * scale).min(0.999));
        let mut a = Vec::with_capacity(timesteps + 1);
        a.push(1.0);
        let mut acc = 1.0;
        for t in 1..=timesteps {
            let beta = lo + (hi - lo) * (t - 1) as f64 / (timesteps - 1) as f64;
            acc *= 1.0 - beta;
            a.push(acc);
        }
        Ok(NoiseSchedule { a })
    }

    pub fn timesteps(&self) -> usize {
        self.a.len() - 1
    }

    /// `a_t` for `t` in `[0, T]`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.a[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.a
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Timestep { t, max: self.timesteps() });
        }
        Ok(())
    }

    /// `steps` descending timesteps from `T` down toward 1; `steps == T`
    /// visits every timestep.
    pub fn sub_schedule(&self, steps: usize) -> Result<Vec<usize>> {
        let big_t = self.timesteps();
        if steps == 0 || steps > big_t {
            return Err(Error::Config(format!("sampling steps {steps} outside [1, {big_t}]")));
        }
        Ok((0..steps).map(|i| big_t - i * big_t / steps).collect())
    }
}

/// `z_t = sqrt(a_t) z_0 + sqrt(1 - a_t) eps` for a single example.
pub fn forward_noise<F: Float>(z0: &[F], eps: &[F], t: usize, schedule: &NoiseSchedule) -> Result<Vec<F>> {
    schedule.check_timestep(t)?;
    if z0.len() != eps.len() {
        return Err(Error::Shape(format!("z0 has {} values, eps {}", z0.len(), eps.len())));
    }
    Ok(noise_with(z0, eps, schedule.alpha_bar(t)))
}

pub(crate) fn noise_with<F: Float>(z0: &[F], eps: &[F], a: f64) -> Vec<F> {
    let s = F::from_f64(a.sqrt());
    let n = F::from_f64((1.0 - a).sqrt());
    z0.iter().zip(eps).map(|(&z, &e)| s * z + n * e).collect()
}

/// Per-example noising of a batch `[B, ...]` with timesteps `t[b]`.
pub fn forward_noise_batch<F: Float>(
    z0: &Tensor<F>,
    eps: &Tensor<F>,
    t: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    if z0.shape() != eps.shape() || z0.shape().first() != Some(&t.len()) {
        return Err(Error::Shape(format!(
            "z0 {:?}, eps {:?}, {} timesteps",
            z0.shape(),
            eps.shape(),
            t.len()
        )));
    }
    let per = z0.numel() / t.len().max(1);
    let mut out = Vec::with_capacity(z0.numel());
    for (b, &tb) in t.iter().enumerate() {
        let range = b * per..(b + 1) * per;
        out.extend(forward_noise(&z0.data()[range.clone()], &eps.data()[range], tb, schedule)?);
    }
    Tensor::new(z0.shape().to_vec(), out)
}
