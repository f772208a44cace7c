//! AdamW with global-norm gradient clipping.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Container, ContainerWriter};
use crate::params::ParamTree;
use crate::tensor::{Float, Tensor};

pub const OPTIM_MAGIC: &str = "MTUOPTM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices and conv kernels only.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, grad_clip: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<F: Float> {
    m: Vec<F>,
    v: Vec<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F: Float> {
    pub config: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments<F>>,
}

/// What one update did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl<F: Float> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, state: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to the named parameters. Frozen entries are rejected.
    pub fn step(&mut self, params: &mut ParamTree<F>, grads: &[(String, Vec<F>)]) -> Result<StepStats> {
        let c = &self.config;
        let mut sq = 0.0;
        for (name, g) in grads {
            let e = params.get(name)?;
            if e.frozen {
                return Err(Error::Config(format!("gradient supplied for frozen parameter `{name}`")));
            }
            if g.len() != e.tensor.numel() {
                return Err(Error::Shape(format!("`{name}`: {} gradient values for {} weights", g.len(), e.tensor.numel())));
            }
            sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient norm"));
        }
        let clipped = c.grad_clip > 0.0 && grad_norm > c.grad_clip;
        let gscale = F::from_f64(if clipped { c.grad_clip / grad_norm } else { 1.0 });

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let step_size = F::from_f64(c.lr / bc1);
        let inv_sqrt_bc2 = F::from_f64(1.0 / bc2.sqrt());
        let eps = F::from_f64(c.eps);
        for (name, g) in grads {
            let entry = params.get_mut(name)?;
            let decay = if entry.tensor.shape().len() >= 2 { F::from_f64(1.0 - c.lr * c.weight_decay) } else { F::one() };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![F::zero(); g.len()],
                v: vec![F::zero(); g.len()],
            });
            for (((w, &gi), m), v) in entry.tensor.data_mut().iter_mut().zip(g).zip(&mut st.m).zip(&mut st.v) {
                let gi = gi * gscale;
                *m = b1 * *m + one_b1 * gi;
                *v = b2 * *v + one_b2 * gi * gi;
                *w = *w * decay - step_size * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
            }
            if !entry.tensor.is_finite() {
                return Err(Error::NonFinite("parameter update"));
            }
        }
        Ok(StepStats { grad_norm, clipped })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ContainerWriter::new(OPTIM_MAGIC);
        w.meta("step", self.step)
            .meta("lr", self.config.lr)
            .meta("beta1", self.config.beta1)
            .meta("beta2", self.config.beta2)
            .meta("eps", self.config.eps)
            .meta("weight_decay", self.config.weight_decay)
            .meta("grad_clip", self.config.grad_clip);
        for (name, st) in &self.state {
            w.tensor(&format!("m.{name}"), &Tensor::new(vec![st.m.len()], st.m.clone())?, Vec::new())?;
            w.tensor(&format!("v.{name}"), &Tensor::new(vec![st.v.len()], st.v.clone())?, Vec::new())?;
        }
        w.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, OPTIM_MAGIC)?;
        let num = |k: &str| -> Result<f64> {
            let v = c.meta(k)?;
            v.parse().map_err(|_| Error::Checkpoint(format!("optimizer meta `{k}` = `{v}`")))
        };
        let config = AdamWConfig {
            lr: num("lr")?,
            beta1: num("beta1")?,
            beta2: num("beta2")?,
            eps: num("eps")?,
            weight_decay: num("weight_decay")?,
            grad_clip: num("grad_clip")?,
        };
        let step = c.meta("step")?.parse().map_err(|_| Error::Checkpoint("optimizer step".into()))?;
        let mut state = BTreeMap::new();
        for r in &c.records {
            if let Some(name) = r.name.strip_prefix("m.") {
                let m = c.tensor::<F>(r)?.into_data();
                let v = c.tensor::<F>(c.record(&format!("v.{name}"))?)?.into_data();
                if m.len() != v.len() {
                    return Err(Error::Checkpoint(format!("moment sizes differ for `{name}`")));
                }
                state.insert(name.to_string(), Moments { m, v });
            }
        }
        Ok(AdamW { config, step, state })
    }

    /// Sets the learning rate, keeping the moments.
    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Component;

    fn tree() -> ParamTree<f64> {
        let mut t = ParamTree::new();
        t.insert("w", Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap(), Component::Other).unwrap();
        t.insert("b", Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap(), Component::Other).unwrap();
        t
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = tree();
        let cfg = AdamWConfig { weight_decay: 0.0, grad_clip: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg);
        let g = vec![("b".to_string(), vec![0.3, -4.0])];
        opt.step(&mut p, &g).unwrap();
        let b = p.tensor("b").unwrap().data();
        assert!((b[0] - (0.1 - 1e-3)).abs() < 1e-9);
        assert!((b[1] - (0.2 + 1e-3)).abs() < 1e-9);
        assert_eq!(p.tensor("w").unwrap().data(), tree().tensor("w").unwrap().data());
    }

    #[test]
    fn clipping_and_frozen_rejection() {
        let mut p = tree();
        let mut opt = AdamW::new(AdamWConfig::default());
        let s = opt.step(&mut p, &[("w".into(), vec![3.0, 0.0, 4.0, 0.0])]).unwrap();
        assert_eq!(s.grad_norm, 5.0);
        assert!(s.clipped);
        p.get_mut("b").unwrap().frozen = true;
        assert!(opt.step(&mut p, &[("b".into(), vec![1.0, 1.0])]).is_err());
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.opt");
        let g1 = vec![("b".to_string(), vec![0.3, -0.4]), ("w".to_string(), vec![0.1, 0.2, -0.3, 0.4])];
        let g2 = vec![("b".to_string(), vec![-0.1, 0.5]), ("w".to_string(), vec![0.0, -0.2, 0.3, 0.1])];
        let (mut a, mut b) = (tree(), tree());
        let mut oa = AdamW::new(AdamWConfig::default());
        oa.step(&mut a, &g1).unwrap();
        oa.save(&path).unwrap();
        oa.step(&mut a, &g2).unwrap();
        let mut ob = AdamW::<f64>::new(AdamWConfig::default());
        ob.step(&mut b, &g1).unwrap();
        let mut restored = AdamW::<f64>::load(&path).unwrap();
        assert_eq!(restored, ob);
        restored.step(&mut b, &g2).unwrap();
        assert!(a.values_equal(&b));
    }
}
