//! Exact parameter and FLOP counts from layer shapes.
//!
//! FLOPs are `2 * multiply-accumulates` of the matrix products and
//! convolutions in one forward call for a single example. Elementwise work
//! (norms, activations, bias adds, softmax) is not counted, except for the
//! weighted expert combination, which is listed on its own row.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::params::Component;
use crate::report::Table;
use crate::task::TaskId;
use crate::tensor::Float;
use crate::upcycle::TaskWeightCache;

/// FLOP-only rows that own no parameters.
pub const ATTENTION_ROW: &str = "attention";
pub const COMBINE_ROW: &str = "moe-combine";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccountingReport {
    pub total_params: u64,
    pub trainable_params: u64,
    pub frozen_params: u64,
    pub flops: u64,
    /// `label -> (params, flops)`; labels are component tags plus the FLOP-only rows.
    pub breakdown: BTreeMap<String, (u64, u64)>,
    pub task: Option<TaskId>,
}

impl AccountingReport {
    pub fn row(&self, label: &str) -> (u64, u64) {
        self.breakdown.get(label).copied().unwrap_or((0, 0))
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["component", "params", "flops"]);
        for (label, (p, f)) in &self.breakdown {
            t.push([label.clone(), p.to_string(), f.to_string()]);
        }
        t.push(["total".to_string(), self.total_params.to_string(), self.flops.to_string()]);
        t.push(["trainable".to_string(), self.trainable_params.to_string(), String::new()]);
        t.push(["frozen".to_string(), self.frozen_params.to_string(), String::new()]);
        t
    }
}

/// Counts for one forward call of `model` on `task`. MTU models count only
/// the experts with nonzero routing weight for the task; routing itself is
/// precomputed and costs nothing per call.
pub fn account<F: Float>(model: &Denoiser<F>, task: TaskId) -> Result<AccountingReport> {
    let cfg = &model.config;
    let mut rows: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let (mut trainable, mut frozen) = (0u64, 0u64);
    for (_, e) in model.params.iter() {
        let n = e.tensor.numel() as u64;
        rows.entry(e.component.to_string()).or_default().0 += n;
        if e.frozen {
            frozen += n;
        } else {
            trainable += n;
        }
    }
    let mut flop = |label: &str, f: u64| rows.entry(label.to_string()).or_default().1 += f;

    let u = |v: usize| v as u64;
    let (hw, c, s) = (u(cfg.image_size * cfg.image_size), u(cfg.channels), u(cfg.stem_channels));
    let (l, lt, d, dt) = (u(cfg.tokens_per_image()), u(cfg.text_len), u(cfg.d_model), u(cfg.d_text));
    let pd = u(cfg.patch_dim());
    let cin = u(task.input_channels(cfg.channels));
    let conv_name = if model.is_mtu() { format!("input_conv.{task}.weight") } else { "input_conv.weight".into() };
    let conv_cin = model.params.tensor(&conv_name).map_err(|_| Error::UnknownTask {
        task: task.to_string(),
        registered: crate::task::list_tasks(&model.tasks()),
    })?;
    if u(conv_cin.shape()[1]) != cin {
        return Err(Error::Shape(format!("{task} needs {cin} input channels, the model's input conv takes {}", conv_cin.shape()[1])));
    }

    flop(Component::InputConv.as_str(), 2 * hw * s * cin * 9);
    flop(Component::Other.as_str(), 2 * l * pd * d + 2 * 2 * d * d + 2 * l * d * pd);
    flop(Component::OutputConv.as_str(), 2 * hw * c * s * 9);

    let cache = if model.is_mtu() { Some(TaskWeightCache::build(model)?) } else { None };
    for layer in 0..cfg.num_blocks {
        for comp in [Component::SaQ, Component::SaK, Component::SaV, Component::SaO, Component::CaQ, Component::CaO] {
            flop(comp.as_str(), 2 * l * d * d);
        }
        flop(Component::CaK.as_str(), 2 * lt * dt * d);
        flop(Component::CaV.as_str(), 2 * lt * dt * d);
        flop(ATTENTION_ROW, 2 * 2 * l * l * d + 2 * 2 * l * lt * d);
        match &cache {
            None => flop(Component::Ffn.as_str(), 2 * 2 * l * d * u(cfg.d_ffn)),
            Some(cache) => {
                let w = cache.get(task, layer)?;
                let mut active = 0;
                for (i, wi) in w.iter().enumerate() {
                    if *wi > F::zero() {
                        let width = model.params.tensor(&format!("block{layer}.ffn.expert{i}.b1"))?.numel();
                        flop(Component::Ffn.as_str(), 2 * 2 * l * d * u(width));
                        active += 1;
                    }
                }
                flop(COMBINE_ROW, 2 * l * d * active);
            }
        }
    }
    let total_params = rows.values().map(|r| r.0).sum();
    let flops = rows.values().map(|r| r.1).sum();
    Ok(AccountingReport {
        total_params,
        trainable_params: trainable,
        frozen_params: frozen,
        flops,
        breakdown: rows,
        task: Some(task),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DenoiserConfig, MoEConfig};
    use crate::upcycle::upcycle;

    /// Closed form for the dense model, written out layer by layer.
    fn dense_flops(c: &DenoiserConfig, cin: u64) -> u64 {
        let hw = (c.image_size * c.image_size) as u64;
        let l = hw / (c.patch_size * c.patch_size) as u64;
        let (d, dt, lt, s, f) = (c.d_model as u64, c.d_text as u64, c.text_len as u64, c.stem_channels as u64, c.d_ffn as u64);
        let p = s * (c.patch_size * c.patch_size) as u64;
        let conv_in = 2 * 9 * cin * s * hw;
        let conv_out = 2 * 9 * s * c.channels as u64 * hw;
        let embed = 2 * l * p * d + 4 * d * d;
        let block = 12 * l * d * d + 4 * lt * dt * d + 4 * l * l * d + 4 * l * lt * d + 4 * l * d * f;
        conv_in + embed + c.num_blocks as u64 * block + 2 * l * d * p + conv_out
    }

    #[test]
    fn dense_matches_closed_form_and_sums() {
        for cfg in [DenoiserConfig::default(), DenoiserConfig::tiny()] {
            let m = Denoiser::<f32>::new_dense(cfg.clone(), 0).unwrap();
            let r = account(&m, TaskId::T2I).unwrap();
            assert_eq!(r.flops, dense_flops(&cfg, 3));
            assert_eq!(r.total_params, m.params.num_params() as u64);
            assert_eq!(r.total_params, r.trainable_params + r.frozen_params);
        }
    }

    #[test]
    fn full_routing_ffn_flops_equal_dense() {
        let dense = Denoiser::<f64>::new_dense(DenoiserConfig::tiny(), 0).unwrap();
        let moe = MoEConfig { experts: 4, top_k: None, d_task: 4, iso_parameter: true };
        let m = upcycle(&dense, &[TaskId::T2I, TaskId::SR], &moe, 0).unwrap();
        let a = account(&dense, TaskId::T2I).unwrap();
        let b = account(&m, TaskId::T2I).unwrap();
        assert_eq!(a.row("FFN").1, b.row("FFN").1);
        assert!(account(&m, TaskId::IE).is_err());
    }
}
