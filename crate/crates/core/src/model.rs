//! The toy denoiser: conv stem, patch tokens, transformer blocks with
//! self-attention, cross-attention on prompt tokens and an FFN (dense or
//! task-routed experts), then an unpatch head with a conv output layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{DenoiserConfig, MoEConfig};
use crate::error::{Error, Result};
use crate::params::{BindMode, Bound, Component, ParamTree};
use crate::task::{list_tasks, TaskId};
use crate::tensor::{Float, Tensor};
use crate::upcycle::{self, TaskWeightCache};

/// Extra structure carried by an upcycled model.
#[derive(Clone, Debug, PartialEq)]
pub struct MtuLayout {
    pub tasks: Vec<TaskId>,
    pub moe: MoEConfig,
}

impl MtuLayout {
    pub fn check_task(&self, task: TaskId) -> Result<()> {
        if self.tasks.contains(&task) {
            Ok(())
        } else {
            Err(Error::UnknownTask { task: task.to_string(), registered: list_tasks(&self.tasks) })
        }
    }
}

/// A denoiser: configuration, parameters, and (for MTU models) the expert layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<F: Float> {
    pub config: DenoiserConfig,
    pub params: ParamTree<F>,
    pub mtu: Option<MtuLayout>,
}

/// How MoE layers obtain their per-task expert weights.
#[derive(Clone, Copy, Debug)]
pub enum Routing<'c, F> {
    /// Evaluate the router on the tape (differentiable).
    OnTheFly,
    /// Use precomputed weights.
    Cached(&'c TaskWeightCache<F>),
}

/// One forward call's inputs for a batch of `B` examples.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a, F> {
    /// Noisy latents `[B, c, H, W]`.
    pub z_t: &'a Tensor<F>,
    /// Condition images `[B, c, H, W]` for image-conditioned tasks.
    pub cond_image: Option<&'a Tensor<F>>,
    /// Prompt token ids, `B * text_len`.
    pub text: &'a [usize],
    /// Per-example timesteps.
    pub t: &'a [usize],
    pub task: Option<TaskId>,
}

pub(crate) fn randn<F: Float>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<F> {
    Tensor::randn(shape, std, rng)
}

fn std_for(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Dense parameters for `cfg`, deterministic in `seed`.
pub fn init_dense<F: Float>(cfg: &DenoiserConfig, seed: u64) -> Result<ParamTree<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamTree::new();
    let (d, s, c) = (cfg.d_model, cfg.stem_channels, cfg.channels);
    let pd = cfg.patch_dim();
    let depth = (2.0 * cfg.num_blocks as f64).sqrt();

    p.insert("input_conv.weight", randn(&mut rng, &[s, c, 3, 3], std_for(c * 9)), Component::InputConv)?;
    p.insert("input_conv.bias", Tensor::zeros(&[s]), Component::InputConv)?;
    p.insert("patch_embed.weight", randn(&mut rng, &[pd, d], std_for(pd)), Component::Other)?;
    p.insert("patch_embed.bias", Tensor::zeros(&[d]), Component::Other)?;
    p.insert("pos_embed", randn(&mut rng, &[cfg.tokens_per_image(), d], 0.1), Component::Embed)?;
    for i in 0..2 {
        p.insert(format!("time_mlp.{i}.weight"), randn(&mut rng, &[d, d], std_for(d)), Component::Other)?;
        p.insert(format!("time_mlp.{i}.bias"), Tensor::zeros(&[d]), Component::Other)?;
    }
    p.insert("text.token_embed", randn(&mut rng, &[cfg.vocab, cfg.d_text], 1.0), Component::Embed)?;
    p.insert("text.pos_embed", randn(&mut rng, &[cfg.text_len, cfg.d_text], 0.1), Component::Embed)?;

    for l in 0..cfg.num_blocks {
        let b = format!("block{l}");
        for n in 1..=3 {
            p.insert(format!("{b}.norm{n}.gamma"), Tensor::full(&[d], F::one()), Component::Norm)?;
            p.insert(format!("{b}.norm{n}.beta"), Tensor::zeros(&[d]), Component::Norm)?;
        }
        let attn = [
            ("sa.q", d, Component::SaQ),
            ("sa.k", d, Component::SaK),
            ("sa.v", d, Component::SaV),
            ("ca.q", d, Component::CaQ),
            ("ca.k", cfg.d_text, Component::CaK),
            ("ca.v", cfg.d_text, Component::CaV),
        ];
        for (name, fan_in, comp) in attn {
            p.insert(format!("{b}.{name}.weight"), randn(&mut rng, &[fan_in, d], std_for(fan_in)), comp)?;
        }
        for (name, comp) in [("sa.o", Component::SaO), ("ca.o", Component::CaO)] {
            p.insert(format!("{b}.{name}.weight"), randn(&mut rng, &[d, d], std_for(d) / depth), comp)?;
            p.insert(format!("{b}.{name}.bias"), Tensor::zeros(&[d]), comp)?;
        }
        p.insert(format!("{b}.ffn.w1"), randn(&mut rng, &[d, cfg.d_ffn], std_for(d)), Component::Ffn)?;
        p.insert(format!("{b}.ffn.b1"), randn(&mut rng, &[cfg.d_ffn], 0.02), Component::Ffn)?;
        p.insert(format!("{b}.ffn.w2"), randn(&mut rng, &[cfg.d_ffn, d], std_for(cfg.d_ffn) / depth), Component::Ffn)?;
        p.insert(format!("{b}.ffn.b2"), randn(&mut rng, &[d], 0.02), Component::Ffn)?;
    }
    p.insert("final_norm.gamma", Tensor::full(&[d], F::one()), Component::Norm)?;
    p.insert("final_norm.beta", Tensor::zeros(&[d]), Component::Norm)?;
    p.insert("unpatch.weight", randn(&mut rng, &[d, pd], std_for(d)), Component::Other)?;
    p.insert("unpatch.bias", Tensor::zeros(&[pd]), Component::Other)?;
    p.insert("output_conv.weight", randn(&mut rng, &[c, s, 3, 3], std_for(s * 9)), Component::OutputConv)?;
    p.insert("output_conv.bias", Tensor::zeros(&[c]), Component::OutputConv)?;
    Ok(p)
}

/// Widens a `[out, c, k, k]` conv to `[out, 2c, k, k]`; the new channels
/// start at zero so the extra input is ignored until trained.
pub fn expand_conv_channels<F: Float>(w: &Tensor<F>, extra: usize) -> Result<Tensor<F>> {
    let s = w.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected a 4-D conv weight, got {s:?}")));
    }
    let (o, cin, kk) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(o * (cin + extra) * kk);
    for oc in 0..o {
        data.extend_from_slice(&w.data()[oc * cin * kk..(oc + 1) * cin * kk]);
        data.extend(std::iter::repeat_n(F::zero(), extra * kk));
    }
    Tensor::new(vec![o, cin + extra, s[2], s[3]], data)
}

/// Sinusoidal timestep features `[B, dim]`: sines then cosines.
pub fn timestep_features<F: Float>(t: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs: Vec<f64> = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp()).collect();
        out.extend(freqs.iter().map(|f| F::from_f64((ti as f64 * f).sin())));
        out.extend(freqs.iter().map(|f| F::from_f64((ti as f64 * f).cos())));
    }
    Tensor::new(vec![t.len(), dim], out).expect("sized above")
}

/// Index that maps `[B, S, H, W]` onto patch tokens `[B * L, S * p * p]`.
fn patchify_index(batch: usize, cfg: &DenoiserConfig) -> Vec<usize> {
    let (s, hw, p) = (cfg.stem_channels, cfg.image_size, cfg.patch_size);
    let side = hw / p;
    let mut idx = Vec::with_capacity(batch * s * hw * hw);
    for b in 0..batch {
        for py in 0..side {
            for px in 0..side {
                for ch in 0..s {
                    for dy in 0..p {
                        for dx in 0..p {
                            idx.push(((b * s + ch) * hw + py * p + dy) * hw + px * p + dx);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`patchify_index`].
fn unpatchify_index(batch: usize, cfg: &DenoiserConfig) -> Vec<usize> {
    let fwd = patchify_index(batch, cfg);
    let mut inv = vec![0; fwd.len()];
    for (tok_pos, &pix) in fwd.iter().enumerate() {
        inv[pix] = tok_pos;
    }
    inv
}

/// Repeats each of `groups` rows of width `width` `reps` times: `[g, w] -> [g * reps, w]`.
fn repeat_rows_index(groups: usize, reps: usize, width: usize) -> Vec<usize> {
    (0..groups)
        .flat_map(|g| (0..reps).flat_map(move |_| g * width..(g + 1) * width))
        .collect()
}

/// Tiles a `[rows, w]` table `times` times: `[rows * times, w]`.
fn tile_index(rows: usize, times: usize, width: usize) -> Vec<usize> {
    (0..times).flat_map(|_| 0..rows * width).collect()
}

fn linear<'t, F: Float>(x: &Var<'t, F>, bound: &Bound<'t, '_, F>, prefix: &str, bias: bool) -> Result<Var<'t, F>> {
    let w = bound.get(&format!("{prefix}.weight"))?;
    if bias {
        let b = bound.get(&format!("{prefix}.bias"))?;
        x.linear(&w, Some(&b))
    } else {
        x.linear(&w, None)
    }
}

fn norm<'t, F: Float>(x: &Var<'t, F>, bound: &Bound<'t, '_, F>, prefix: &str) -> Result<Var<'t, F>> {
    x.layer_norm(&bound.get(&format!("{prefix}.gamma"))?, &bound.get(&format!("{prefix}.beta"))?)
}

/// Two-layer GELU MLP `gelu(x W1 + b1) W2 + b2`, parameters under `prefix`.
pub(crate) fn ffn<'t, F: Float>(x: &Var<'t, F>, bound: &Bound<'t, '_, F>, prefix: &str) -> Result<Var<'t, F>> {
    let p = |n: &str| bound.get(&format!("{prefix}.{n}"));
    x.linear(&p("w1")?, Some(&p("b1")?))?.gelu()?.linear(&p("w2")?, Some(&p("b2")?))
}

impl<F: Float> Denoiser<F> {
    pub fn new_dense(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let params = init_dense(&config, seed)?;
        Ok(Denoiser { config, params, mtu: None })
    }

    pub fn is_mtu(&self) -> bool {
        self.mtu.is_some()
    }

    /// Tasks this model can run. Dense models accept any task whose channel
    /// count matches their input conv.
    pub fn tasks(&self) -> Vec<TaskId> {
        match &self.mtu {
            Some(m) => m.tasks.clone(),
            None => {
                let cin = self.params.tensor("input_conv.weight").map(|w| w.shape()[1]).unwrap_or(0);
                TaskId::ALL.into_iter().filter(|t| t.input_channels(self.config.channels) == cin).collect()
            }
        }
    }

    fn input_conv_prefix(&self, task: Option<TaskId>) -> Result<String> {
        match (&self.mtu, task) {
            (None, _) => Ok("input_conv".into()),
            (Some(m), Some(t)) => {
                m.check_task(t)?;
                Ok(format!("input_conv.{t}"))
            }
            (Some(_), None) => Err(Error::Config("an upcycled model needs a task to run".into())),
        }
    }

    /// Builds the forward graph and returns `eps_hat` as `[B, c, H, W]`.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t, '_, F>,
        input: &ModelInput<'_, F>,
        routing: Routing<'_, F>,
    ) -> Result<Var<'t, F>> {
        let cfg = &self.config;
        let tape = bound.tape();
        let zs = input.z_t.shape();
        let hw = cfg.image_size;
        if zs.len() != 4 || zs[1] != cfg.channels || zs[2] != hw || zs[3] != hw {
            return Err(Error::Shape(format!(
                "latents {zs:?} do not match [B, {}, {hw}, {hw}]",
                cfg.channels
            )));
        }
        let batch = zs[0];
        if input.t.len() != batch || input.text.len() != batch * cfg.text_len {
            return Err(Error::Shape(format!(
                "batch {batch} with {} timesteps and {} prompt tokens (text_len {})",
                input.t.len(),
                input.text.len(),
                cfg.text_len
            )));
        }
        let prefix = self.input_conv_prefix(input.task)?;
        let conv_w = bound.get(&format!("{prefix}.weight"))?;
        let conv_b = bound.get(&format!("{prefix}.bias"))?;
        let expected_cin = conv_w.shape()[1];

        let mut x = tape.constant(input.z_t)?;
        if let Some(ci) = input.cond_image {
            if ci.shape() != zs {
                return Err(Error::Shape(format!("condition image {:?} vs latents {zs:?}", ci.shape())));
            }
            x = x.concat_channels(&tape.constant(ci)?)?;
        }
        let got_cin = x.shape()[1];
        if got_cin != expected_cin {
            return Err(Error::Shape(format!(
                "input conv `{prefix}` expects {expected_cin} channels, got {got_cin}"
            )));
        }
        for &t in input.t {
            if t == 0 || t > cfg.timesteps {
                return Err(Error::Timestep { t, max: cfg.timesteps });
            }
        }
        if let Some(&bad) = input.text.iter().find(|&&id| id >= cfg.vocab) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
        }

        let tokens = cfg.tokens_per_image();
        let d = cfg.d_model;
        let stem = x.conv2d(&conv_w, &conv_b, 1)?;
        let patches = stem.gather(patchify_index(batch, cfg), &[batch * tokens, cfg.patch_dim()])?;
        let mut h = linear(&patches, bound, "patch_embed", true)?;

        let pos = bound.get("pos_embed")?.gather(tile_index(tokens, batch, d), &[batch * tokens, d])?;
        h = h.add(&pos)?;
        let tfeat = tape.constant(&timestep_features::<F>(input.t, d))?;
        let temb = linear(&tfeat, bound, "time_mlp.0", true)?.gelu()?;
        let temb = linear(&temb, bound, "time_mlp.1", true)?;
        h = h.add(&temb.gather(repeat_rows_index(batch, tokens, d), &[batch * tokens, d])?)?;

        let dt = cfg.d_text;
        let ctx = bound.get("text.token_embed")?.embedding(input.text)?;
        let tpos = bound.get("text.pos_embed")?.gather(tile_index(cfg.text_len, batch, dt), &[batch * cfg.text_len, dt])?;
        let ctx = ctx.add(&tpos)?;

        for l in 0..cfg.num_blocks {
            let b = format!("block{l}");
            let n1 = norm(&h, bound, &format!("{b}.norm1"))?;
            let q = linear(&n1, bound, &format!("{b}.sa.q"), false)?;
            let k = linear(&n1, bound, &format!("{b}.sa.k"), false)?;
            let v = linear(&n1, bound, &format!("{b}.sa.v"), false)?;
            let a = q.attention(&k, &v, batch, cfg.heads)?;
            h = h.add(&linear(&a, bound, &format!("{b}.sa.o"), true)?)?;

            let n2 = norm(&h, bound, &format!("{b}.norm2"))?;
            let q = linear(&n2, bound, &format!("{b}.ca.q"), false)?;
            let k = linear(&ctx, bound, &format!("{b}.ca.k"), false)?;
            let v = linear(&ctx, bound, &format!("{b}.ca.v"), false)?;
            let a = q.attention(&k, &v, batch, cfg.heads)?;
            h = h.add(&linear(&a, bound, &format!("{b}.ca.o"), true)?)?;

            let f = match (&self.mtu, input.task) {
                (None, _) => {
                    let n3 = norm(&h, bound, &format!("{b}.norm3"))?;
                    ffn(&n3, bound, &format!("{b}.ffn"))?
                }
                (Some(layout), Some(task)) => upcycle::moe_ffn_forward(&h, bound, layout, l, task, routing)?,
                (Some(_), None) => unreachable!("checked by input_conv_prefix"),
            };
            h = h.add(&f)?;
        }

        let h = norm(&h, bound, "final_norm")?;
        let out_tokens = linear(&h, bound, "unpatch", true)?;
        let s = cfg.stem_channels;
        let img = out_tokens.gather(unpatchify_index(batch, cfg), &[batch, s, hw, hw])?;
        let img = img.add(&stem)?.gelu()?;
        img.conv2d(&bound.get("output_conv.weight")?, &bound.get("output_conv.bias")?, 1)
    }

    /// Inference-only forward returning `eps_hat`.
    pub fn predict(&self, input: &ModelInput<'_, F>, routing: Routing<'_, F>) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let bound = Bound::new(&tape, &self.params, BindMode::Inference);
        Ok(self.forward(&bound, input, routing)?.to_tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(cfg: &DenoiserConfig, batch: usize, seed: u64) -> (Tensor<f64>, Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = randn(&mut rng, &[batch, cfg.channels, cfg.image_size, cfg.image_size], 1.0);
        let text = (0..batch * cfg.text_len).map(|i| (i * 7 + seed as usize) % cfg.vocab).collect();
        let t = (0..batch).map(|i| 1 + (i * 5 + seed as usize) % cfg.timesteps).collect();
        (z, text, t)
    }

    #[test]
    fn patch_round_trip() {
        let cfg = DenoiserConfig::tiny();
        let fwd = patchify_index(2, &cfg);
        let inv = unpatchify_index(2, &cfg);
        for (i, &j) in inv.iter().enumerate() {
            assert_eq!(fwd[j], i);
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let cfg = DenoiserConfig::tiny();
        let m = Denoiser::<f64>::new_dense(cfg.clone(), 3).unwrap();
        let (z, text, t) = inputs(&cfg, 2, 1);
        let input = ModelInput { z_t: &z, cond_image: None, text: &text, t: &t, task: Some(TaskId::T2I) };
        let a = m.predict(&input, Routing::OnTheFly).unwrap();
        let b = m.predict(&input, Routing::OnTheFly).unwrap();
        assert_eq!(a.shape(), z.shape());
        assert!(crate::tensor::bitwise_eq(a.data(), b.data()));
    }

    #[test]
    fn zero_output_conv_gives_zero_prediction() {
        let cfg = DenoiserConfig::tiny();
        let mut m = Denoiser::<f64>::new_dense(cfg.clone(), 3).unwrap();
        for name in ["output_conv.weight", "output_conv.bias"] {
            let e = m.params.get_mut(name).unwrap();
            e.tensor = Tensor::zeros(e.tensor.shape());
        }
        let (z, text, t) = inputs(&cfg, 2, 4);
        let input = ModelInput { z_t: &z, cond_image: None, text: &text, t: &t, task: None };
        let out = m.predict(&input, Routing::OnTheFly).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let cfg = DenoiserConfig::tiny();
        let m = Denoiser::<f64>::new_dense(cfg.clone(), 3).unwrap();
        let (z, text, t) = inputs(&cfg, 1, 2);
        let input = ModelInput { z_t: &z, cond_image: Some(&z), text: &text, t: &t, task: Some(TaskId::IE) };
        let msg = m.predict(&input, Routing::OnTheFly).unwrap_err().to_string();
        assert!(msg.contains("expects 3 channels, got 6"), "{msg}");
    }

    #[test]
    fn duplicated_batch_matches_singleton() {
        let cfg = DenoiserConfig::tiny();
        let m = Denoiser::<f64>::new_dense(cfg.clone(), 5).unwrap();
        let (z, text, t) = inputs(&cfg, 1, 9);
        let single = m
            .predict(&ModelInput { z_t: &z, cond_image: None, text: &text, t: &t, task: None }, Routing::OnTheFly)
            .unwrap();
        let mut zz = z.data().to_vec();
        zz.extend_from_slice(z.data());
        let mut shape = z.shape().to_vec();
        shape[0] = 2;
        let z2 = Tensor::new(shape, zz).unwrap();
        let text2 = [text.clone(), text].concat();
        let t2 = [t.clone(), t].concat();
        let pair = m
            .predict(&ModelInput { z_t: &z2, cond_image: None, text: &text2, t: &t2, task: None }, Routing::OnTheFly)
            .unwrap();
        let n = single.numel();
        for half in pair.data().chunks(n) {
            for (a, b) in half.iter().zip(single.data()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn expanded_conv_ignores_extra_channels() {
        let cfg = DenoiserConfig::tiny();
        let base = Denoiser::<f64>::new_dense(cfg.clone(), 8).unwrap();
        let mut wide = base.clone();
        let w = wide.params.tensor("input_conv.weight").unwrap().clone();
        wide.params.get_mut("input_conv.weight").unwrap().tensor = expand_conv_channels(&w, cfg.channels).unwrap();
        let (z, text, t) = inputs(&cfg, 2, 3);
        let (cond, _, _) = inputs(&cfg, 2, 4);
        let a = base
            .predict(&ModelInput { z_t: &z, cond_image: None, text: &text, t: &t, task: None }, Routing::OnTheFly)
            .unwrap();
        let b = wide
            .predict(
                &ModelInput { z_t: &z, cond_image: Some(&cond), text: &text, t: &t, task: Some(TaskId::IE) },
                Routing::OnTheFly,
            )
            .unwrap();
        assert!(crate::tensor::relative_error(b.data(), a.data()) < 1e-12);
        assert_eq!(wide.tasks(), TaskId::IMAGE_TASKS.to_vec());
    }
}
