//! Dense-to-MTU conversion: sharded FFN experts, task-embedding routers,
//! per-task FFN norms and per-task input convolutions.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::MoEConfig;
use crate::error::{Error, Result};
use crate::model::{expand_conv_channels, ffn, randn, Denoiser, MtuLayout, Routing};
use crate::params::{BindMode, Bound, Component, ParamEntry, ParamTree};
use crate::task::TaskId;
use crate::tensor::{Float, Tensor};

/// Weights of one two-layer FFN: `w1 [d, h]`, `b1 [h]`, `w2 [h, d]`, `b2 [d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<F: Float> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

impl<F: Float> FfnParams<F> {
    pub fn num_params(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.numel()
    }

    pub fn hidden(&self) -> usize {
        self.b1.numel()
    }

    pub fn from_tree(tree: &ParamTree<F>, prefix: &str) -> Result<Self> {
        let get = |n: &str| tree.tensor(&format!("{prefix}.{n}")).cloned();
        Ok(FfnParams { w1: get("w1")?, b1: get("b1")?, w2: get("w2")?, b2: get("b2")? })
    }

    fn insert_into(self, tree: &mut ParamTree<F>, prefix: &str) -> Result<()> {
        for (n, t) in [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)] {
            tree.insert(format!("{prefix}.{n}"), t, Component::Ffn)?;
        }
        Ok(())
    }

    /// Evaluates `gelu(x W1 + b1) W2 + b2` on `[rows, d]` inputs.
    pub fn apply(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let c = |t: &Tensor<F>| tape.constant(t);
        let y = c(x)?.linear(&c(&self.w1)?, Some(&c(&self.b1)?))?.gelu()?.linear(&c(&self.w2)?, Some(&c(&self.b2)?))?;
        Ok(y.to_tensor())
    }
}

/// Columns `[lo, hi)` of a row-major `[rows, cols]` matrix.
fn column_block<F: Float>(m: &Tensor<F>, lo: usize, hi: usize) -> Tensor<F> {
    let cols = m.shape()[1];
    let data = m.data().chunks(cols).flat_map(|row| row[lo..hi].iter().copied()).collect();
    Tensor::new(vec![m.shape()[0], hi - lo], data).expect("sized from source")
}

/// Rows `[lo, hi)` of a row-major `[rows, cols]` matrix, times `scale`.
fn row_block<F: Float>(m: &Tensor<F>, lo: usize, hi: usize, scale: F) -> Tensor<F> {
    let cols = m.shape()[1];
    let data = m.data()[lo * cols..hi * cols].iter().map(|&v| v * scale).collect();
    Tensor::new(vec![hi - lo, cols], data).expect("sized from source")
}

/// Splits a dense FFN into `n` experts of width `d_ffn / n`.
///
/// Expert `i` takes hidden units `[i w, (i + 1) w)` of the first layer, the
/// matching rows of `W2` scaled by `n`, and a full copy of `b2`, so the
/// average of the experts equals the dense FFN.
pub fn shard_ffn<F: Float>(dense: &FfnParams<F>, n: usize) -> Result<Vec<FfnParams<F>>> {
    let hidden = dense.hidden();
    if n == 0 || !hidden.is_multiple_of(n) {
        return Err(Error::Divisibility { what: "d_ffn", value: hidden, expected: n });
    }
    if dense.w1.shape() != [dense.w1.shape()[0], hidden] || dense.w2.shape() != [hidden, dense.b2.numel()] {
        return Err(Error::Shape(format!(
            "inconsistent FFN: w1 {:?}, b1 [{hidden}], w2 {:?}, b2 [{}]",
            dense.w1.shape(),
            dense.w2.shape(),
            dense.b2.numel()
        )));
    }
    let width = hidden / n;
    let scale = F::from_usize(n);
    Ok((0..n)
        .map(|i| {
            let (lo, hi) = (i * width, (i + 1) * width);
            FfnParams {
                w1: column_block(&dense.w1, lo, hi),
                b1: Tensor::new(vec![width], dense.b1.data()[lo..hi].to_vec()).expect("sized"),
                w2: row_block(&dense.w2, lo, hi, scale),
                b2: dense.b2.clone(),
            }
        })
        .collect())
}

/// Expert initialization for `cfg`: plain sharding in iso-parameter mode;
/// otherwise `top_k` shards cycled across the `N` experts, so the `k`
/// experts selected at initialization reproduce the dense FFN.
pub fn init_experts<F: Float>(dense: &FfnParams<F>, cfg: &MoEConfig) -> Result<Vec<FfnParams<F>>> {
    cfg.validate()?;
    cfg.expert_width(dense.hidden())?;
    let shards = shard_ffn(dense, cfg.shards())?;
    Ok((0..cfg.experts).map(|i| shards[i % shards.len()].clone()).collect())
}

/// Router weights for one layer: `d_task -> hidden -> N`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<F: Float> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

impl<F: Float> RouterParams<F> {
    /// Random first layer, zero second layer (uniform routing at start).
    pub fn init(cfg: &MoEConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.router_hidden();
        RouterParams {
            w1: randn(rng, &[cfg.d_task, h], 1.0 / (cfg.d_task as f64).sqrt()),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[h, cfg.experts]),
            b2: Tensor::zeros(&[cfg.experts]),
        }
    }

    pub fn from_tree(tree: &ParamTree<F>, layer: usize) -> Result<Self> {
        let get = |n: &str| tree.tensor(&format!("block{layer}.router.{n}")).cloned();
        Ok(RouterParams { w1: get("w1")?, b1: get("b1")?, w2: get("w2")?, b2: get("b2")? })
    }
}

/// `softmax(g(e))` with optional top-k renormalization, on the tape.
fn route_graph<'t, F: Float>(
    e: &Var<'t, F>,
    w1: &Var<'t, F>,
    b1: &Var<'t, F>,
    w2: &Var<'t, F>,
    b2: &Var<'t, F>,
    top_k: Option<usize>,
) -> Result<Var<'t, F>> {
    let d_task = e.shape().iter().product::<usize>();
    if w1.shape()[0] != d_task {
        return Err(Error::Shape(format!(
            "task embedding width {d_task} vs router input {:?}",
            w1.shape()
        )));
    }
    let n = w2.shape()[1];
    let logits = e.reshape(&[1, d_task])?.linear(w1, Some(b1))?.relu()?.linear(w2, Some(b2))?.reshape(&[n])?;
    let w = logits.softmax_canonical()?;
    match top_k {
        Some(k) if k > n => Err(Error::Config(format!("top_k {k} exceeds expert count {n}"))),
        Some(k) if k < n => w.top_k_renorm(k),
        _ => Ok(w),
    }
}

/// Routing weights for one task embedding and router.
pub fn route<F: Float>(e: &Tensor<F>, router: &RouterParams<F>, top_k: Option<usize>) -> Result<Vec<F>> {
    let tape = Tape::new();
    let c = |t: &Tensor<F>| tape.constant(t);
    let w = route_graph(&c(e)?, &c(&router.w1)?, &c(&router.b1)?, &c(&router.w2)?, &c(&router.b2)?, top_k)?;
    Ok(w.value())
}

fn route_var<'t, F: Float>(bound: &Bound<'t, '_, F>, layout: &MtuLayout, layer: usize, task: TaskId) -> Result<Var<'t, F>> {
    let r = |n: &str| bound.get(&format!("block{layer}.router.{n}"));
    let e = bound.get(&format!("task_embed.{task}"))?;
    route_graph(&e, &r("w1")?, &r("b1")?, &r("w2")?, &r("b2")?, layout.moe.top_k)
}

/// Experts with nonzero weight, largest weight first (ties: lower index).
/// A fixed order makes the combination independent of expert numbering.
pub fn combine_order<F: Float>(w: &[F]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..w.len()).filter(|&i| w[i] > F::zero()).collect();
    order.sort_by(|&i, &j| w[j].partial_cmp(&w[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    order
}

/// Task-normalized, weighted sum of expert outputs for block `layer`.
pub fn moe_ffn_forward<'t, F: Float>(
    x: &Var<'t, F>,
    bound: &Bound<'t, '_, F>,
    layout: &MtuLayout,
    layer: usize,
    task: TaskId,
    routing: Routing<'_, F>,
) -> Result<Var<'t, F>> {
    layout.check_task(task)?;
    let gamma = bound.get(&format!("block{layer}.ffn_norm.{task}.gamma"))?;
    let beta = bound.get(&format!("block{layer}.ffn_norm.{task}.beta"))?;
    let h = x.layer_norm(&gamma, &beta)?;
    let weights = match routing {
        Routing::OnTheFly => route_var(bound, layout, layer, task)?,
        Routing::Cached(cache) => bound.tape().constant_from(vec![layout.moe.experts], cache.get(task, layer)?.to_vec())?,
    };
    let mut acc: Option<Var<'t, F>> = None;
    for i in combine_order(&weights.value()) {
        let y = ffn(&h, bound, &format!("block{layer}.ffn.expert{i}"))?.scale_by_elem(&weights, i)?;
        acc = Some(match acc {
            None => y,
            Some(a) => a.add(&y)?,
        });
    }
    acc.ok_or_else(|| Error::Config(format!("no expert has positive weight for {task} in block {layer}")))
}

/// Precomputed routing weights per (task, layer).
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWeightCache<F> {
    weights: BTreeMap<(TaskId, usize), Vec<F>>,
    fingerprint: u64,
}

/// Hash of the bits of every router and task-embedding tensor.
fn routing_fingerprint<F: Float>(params: &ParamTree<F>) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, e) in params.iter() {
        if name.contains(".router.") || name.starts_with("task_embed.") {
            name.hash(&mut h);
            e.tensor.data().iter().for_each(|v| v.bits().hash(&mut h));
        }
    }
    h.finish()
}

impl<F: Float> TaskWeightCache<F> {
    pub fn build(model: &Denoiser<F>) -> Result<Self> {
        let layout = model.mtu.as_ref().ok_or_else(|| Error::Config("dense models have no routers".into()))?;
        let tape = Tape::new();
        let bound = Bound::new(&tape, &model.params, BindMode::Inference);
        let mut weights = BTreeMap::new();
        for &task in &layout.tasks {
            for l in 0..model.config.num_blocks {
                weights.insert((task, l), route_var(&bound, layout, l, task)?.value());
            }
        }
        Ok(TaskWeightCache { weights, fingerprint: routing_fingerprint(&model.params) })
    }

    pub fn get(&self, task: TaskId, layer: usize) -> Result<&[F]> {
        self.weights.get(&(task, layer)).map(Vec::as_slice).ok_or_else(|| {
            let tasks: Vec<TaskId> = self.weights.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            Error::UnknownTask { task: format!("{task} (block {layer})"), registered: crate::task::list_tasks(&tasks) }
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (TaskId, usize, &[F])> {
        self.weights.iter().map(|(&(t, l), w)| (t, l, w.as_slice()))
    }

    /// True when routers or task embeddings changed since the cache was built.
    pub fn is_stale(&self, model: &Denoiser<F>) -> bool {
        self.fingerprint != routing_fingerprint(&model.params)
    }

    /// Rebuilds if stale; returns whether anything was recomputed.
    pub fn refresh(&mut self, model: &Denoiser<F>) -> Result<bool> {
        if !self.is_stale(model) {
            return Ok(false);
        }
        *self = Self::build(model)?;
        Ok(true)
    }
}

/// Whether a parameter of an upcycled model is trained.
pub fn is_mtu_trainable(name: &str) -> bool {
    name.starts_with("input_conv.")
        || name.starts_with("task_embed.")
        || name.contains(".ffn.expert")
        || name.contains(".router.")
        || name.contains(".ffn_norm.")
}

/// Converts a dense T2I denoiser into an MTU model for `tasks`.
pub fn upcycle<F: Float>(pretrained: &Denoiser<F>, tasks: &[TaskId], cfg: &MoEConfig, seed: u64) -> Result<Denoiser<F>> {
    if pretrained.is_mtu() {
        return Err(Error::Config("model is already upcycled".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Config("upcycling needs at least one task".into()));
    }
    let mut sorted = tasks.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != tasks.len() {
        return Err(Error::Config(format!("duplicate task in {}", crate::task::list_tasks(tasks))));
    }
    cfg.validate()?;
    let mc = &pretrained.config;
    cfg.expert_width(mc.d_ffn)?;
    let reference = crate::model::init_dense::<F>(mc, 0)?;
    pretrained.params.check_congruent(&reference)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = pretrained.params.clone();
    let take = |p: &mut ParamTree<F>, name: &str| p.remove(name).ok_or_else(|| Error::MissingParam(name.into()));

    let conv_w = take(&mut p, "input_conv.weight")?.tensor;
    let conv_b = take(&mut p, "input_conv.bias")?.tensor;
    for &task in tasks {
        let extra = task.input_channels(mc.channels) - mc.channels;
        let w = if extra == 0 { conv_w.clone() } else { expand_conv_channels(&conv_w, extra)? };
        p.insert(format!("input_conv.{task}.weight"), w, Component::InputConv)?;
        p.insert(format!("input_conv.{task}.bias"), conv_b.clone(), Component::InputConv)?;
    }
    for &task in tasks {
        p.insert(format!("task_embed.{task}"), randn(&mut rng, &[cfg.d_task], 1.0), Component::Embed)?;
    }
    for l in 0..mc.num_blocks {
        let b = format!("block{l}");
        let gamma = take(&mut p, &format!("{b}.norm3.gamma"))?.tensor;
        let beta = take(&mut p, &format!("{b}.norm3.beta"))?.tensor;
        for &task in tasks {
            p.insert(format!("{b}.ffn_norm.{task}.gamma"), gamma.clone(), Component::Norm)?;
            p.insert(format!("{b}.ffn_norm.{task}.beta"), beta.clone(), Component::Norm)?;
        }
        let dense = FfnParams::from_tree(&p, &format!("{b}.ffn"))?;
        for n in ["w1", "b1", "w2", "b2"] {
            take(&mut p, &format!("{b}.ffn.{n}"))?;
        }
        for (i, e) in init_experts(&dense, cfg)?.into_iter().enumerate() {
            e.insert_into(&mut p, &format!("{b}.ffn.expert{i}"))?;
        }
        let r = RouterParams::init(cfg, &mut rng);
        for (n, t) in [("w1", r.w1), ("b1", r.b1), ("w2", r.w2), ("b2", r.b2)] {
            p.insert_entry(format!("{b}.router.{n}"), ParamEntry { tensor: t, component: Component::Other, frozen: false })?;
        }
    }
    p.set_frozen(|name, _| !is_mtu_trainable(name));
    Ok(Denoiser {
        config: mc.clone(),
        params: p,
        mtu: Some(MtuLayout { tasks: tasks.to_vec(), moe: cfg.clone() }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DenoiserConfig;
    use crate::tensor::{bitwise_eq, relative_error};

    fn dense_ffn(d: usize, h: usize, seed: u64) -> FfnParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FfnParams {
            w1: randn(&mut rng, &[d, h], 0.5),
            b1: randn(&mut rng, &[h], 0.5),
            w2: randn(&mut rng, &[h, d], 0.5),
            b2: randn(&mut rng, &[d], 0.5),
        }
    }

    #[test]
    fn single_shard_is_the_dense_ffn() {
        let dense = dense_ffn(4, 8, 1);
        let shards = shard_ffn(&dense, 1).unwrap();
        assert_eq!(shards, vec![dense]);
    }

    #[test]
    fn shard_average_reproduces_dense() {
        let dense = dense_ffn(5, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f64> = randn(&mut rng, &[6, 5], 1.0);
        let want = dense.apply(&x).unwrap();
        let shards = shard_ffn(&dense, 4).unwrap();
        let mut sum = vec![0.0; want.numel()];
        for s in &shards {
            for (a, b) in sum.iter_mut().zip(s.apply(&x).unwrap().data()) {
                *a += b / 4.0;
            }
        }
        assert!(relative_error(&sum, want.data()) < 1e-12);
        let total: usize = shards.iter().map(FfnParams::num_params).sum();
        assert_eq!(total, dense.num_params() + 3 * dense.b2.numel());
    }

    #[test]
    fn shard_count_must_divide_width() {
        let msg = shard_ffn(&dense_ffn(4, 8, 1), 3).unwrap_err().to_string();
        assert!(msg.contains('3') && msg.contains('8'), "{msg}");
    }

    #[test]
    fn zero_router_is_uniform() {
        let cfg = MoEConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = RouterParams::<f64>::init(&cfg, &mut rng);
        let e = randn(&mut rng, &[cfg.d_task], 1.0);
        assert_eq!(route(&e, &r, None).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn top_k_example() {
        // logits [3, 1, 2, 0] via an identity-ish router with ReLU passthrough
        let r = RouterParams::<f64> {
            w1: Tensor::from_f64(&[1, 4], &[3.0, 1.0, 2.0, 0.0]).unwrap(),
            b1: Tensor::zeros(&[4]),
            w2: Tensor::from_f64(&[4, 4], &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.]).unwrap(),
            b2: Tensor::zeros(&[4]),
        };
        let e = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let w = route(&e, &r, Some(2)).unwrap();
        let (a, b) = (3f64.exp(), 2f64.exp());
        let expect = [a / (a + b), 0.0, b / (a + b), 0.0];
        for (x, y) in w.iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(route(&e, &r, Some(5)).is_err());
        assert!(bitwise_eq(&route(&e, &r, Some(4)).unwrap(), &route(&e, &r, None).unwrap()));
    }

    #[test]
    fn upcycle_layout_and_freezing() {
        let cfg = DenoiserConfig::tiny();
        let dense = Denoiser::<f64>::new_dense(cfg.clone(), 1).unwrap();
        let moe = MoEConfig { experts: 2, d_task: 4, ..Default::default() };
        let m = upcycle(&dense, &TaskId::ALL, &moe, 2).unwrap();
        assert!(m.params.contains("block1.ffn.expert1.w2"));
        assert!(!m.params.contains("block1.ffn.w2"));
        assert!(!m.params.contains("block0.norm3.gamma"));
        assert_eq!(m.params.tensor("input_conv.SR.weight").unwrap().shape()[1], 6);
        for (name, e) in m.params.iter() {
            assert_eq!(e.frozen, !is_mtu_trainable(name), "{name}");
        }
        assert!(m.params.get("block0.sa.q.weight").unwrap().frozen);
        assert!(!m.params.get("task_embed.IE").unwrap().frozen);
        assert!(upcycle(&dense, &[], &moe, 2).is_err());
        let bad = MoEConfig { experts: 3, ..moe };
        assert!(matches!(upcycle(&dense, &[TaskId::T2I], &bad, 2), Err(Error::Divisibility { .. })));
    }

    #[test]
    fn cache_tracks_router_updates() {
        let cfg = DenoiserConfig::tiny();
        let dense = Denoiser::<f64>::new_dense(cfg, 1).unwrap();
        let moe = MoEConfig { experts: 2, d_task: 4, ..Default::default() };
        let mut m = upcycle(&dense, &[TaskId::T2I, TaskId::SR], &moe, 2).unwrap();
        let mut cache = TaskWeightCache::build(&m).unwrap();
        assert!(cache.iter().all(|(_, _, w)| w == [0.5, 0.5]));
        assert!(!cache.refresh(&m).unwrap());
        m.params.get_mut("block0.router.b2").unwrap().tensor = Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap();
        let stale = cache.clone();
        assert!(cache.refresh(&m).unwrap());
        assert_ne!(stale.get(TaskId::T2I, 0).unwrap(), cache.get(TaskId::T2I, 0).unwrap());
        assert_eq!(stale.get(TaskId::SR, 1).unwrap(), cache.get(TaskId::SR, 1).unwrap());
        assert!(cache.get(TaskId::IE, 0).is_err());
    }
}
