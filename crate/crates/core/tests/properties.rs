//! Property tests for the model, routing, sampler and analysis invariants.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtu_core::deviation::{frobenius_deviation, midranks_desc, rank_components, DeviationReport};
use mtu_core::metrics::{ii_directional_similarity, it_directional_similarity};
use mtu_core::sampler::{sample, Guidance, SampleRequest, SamplerOptions};
use mtu_core::tensor::{bitwise_eq, relative_error};
use mtu_core::train::prepare_finetune;
use mtu_core::upcycle::{route, upcycle, RouterParams, TaskWeightCache};
use mtu_core::{Denoiser, DenoiserConfig, MoEConfig, ModelInput, NoiseSchedule, ParamTree, Routing, TaskId, Tensor};

fn tiny_mtu(seed: u64, experts: usize, top_k: Option<usize>) -> Denoiser<f64> {
    let pre = Denoiser::<f64>::new_dense(DenoiserConfig::tiny(), seed).unwrap();
    let moe = MoEConfig { experts, top_k, d_task: 4, iso_parameter: true };
    let mut m = upcycle(&pre, &TaskId::ALL, &moe, seed + 1).unwrap();
    jitter(&mut m.params, seed + 2, ".router.");
    m
}

/// Adds uniform noise to every tensor whose name contains `pattern`.
fn jitter(p: &mut ParamTree<f64>, seed: u64, pattern: &str) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, e) in p.iter_mut() {
        if name.contains(pattern) {
            for v in e.tensor.data_mut() {
                *v += rng.random_range(-1.0..1.0);
            }
        }
    }
}

struct Inputs {
    z: Tensor<f64>,
    cond: Option<Tensor<f64>>,
    text: Vec<usize>,
    t: Vec<usize>,
}

fn inputs(cfg: &DenoiserConfig, task: TaskId, batch: usize, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [batch, cfg.channels, cfg.image_size, cfg.image_size];
    let z = Tensor::randn(&shape, 1.0, &mut rng);
    let cond = task.image_conditioned().then(|| Tensor::randn(&shape, 1.0, &mut rng));
    let text = (0..batch * cfg.text_len).map(|_| rng.random_range(0..cfg.vocab)).collect();
    let t = (0..batch).map(|_| rng.random_range(1..=cfg.timesteps)).collect();
    Inputs { z, cond, text, t }
}

fn predict(m: &Denoiser<f64>, x: &Inputs, task: TaskId, routing: Routing<'_, f64>) -> Tensor<f64> {
    let input = ModelInput { z_t: &x.z, cond_image: x.cond.as_ref(), text: &x.text, t: &x.t, task: Some(task) };
    m.predict(&input, routing).unwrap()
}

fn task_strategy() -> impl Strategy<Value = TaskId> {
    prop::sample::select(TaskId::ALL.to_vec())
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// The sampler loop written out directly: DDIM over every timestep with
/// text guidance extrapolated from the null prompt.
fn reference_sample(m: &Denoiser<f64>, schedule: &NoiseSchedule, text: &[usize], seed: u64, scale: f64, null: usize) -> Vec<f64> {
    let cfg = &m.config;
    let shape = vec![1, cfg.channels, cfg.image_size, cfg.image_size];
    let start: Tensor<f64> = Tensor::randn(&shape[1..], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut z = start.data().to_vec();
    let null_text = vec![null; text.len()];
    for t in (1..=cfg.timesteps).rev() {
        let zt = Tensor::new(shape.clone(), z.clone()).unwrap();
        let eval = |tokens: &[usize]| {
            let input = ModelInput { z_t: &zt, cond_image: None, text: tokens, t: &[t], task: Some(TaskId::T2I) };
            m.predict(&input, Routing::OnTheFly).unwrap().data().to_vec()
        };
        let (c, u) = (eval(text), eval(&null_text));
        let eps: Vec<f64> = c.iter().zip(&u).map(|(c, u)| u + scale * (c - u)).collect();
        let (a, a_prev) = (schedule.alpha_bar(t), if t == 1 { 1.0 } else { schedule.alpha_bar(t - 1) });
        z = z
            .iter()
            .zip(&eps)
            .map(|(z, e)| {
                let x0 = ((z - (1.0 - a).sqrt() * e) / a.sqrt()).clamp(-1.0, 1.0);
                a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * e
            })
            .collect();
    }
    z
}

#[test]
fn sampler_matches_reference_loop() {
    let pre = Denoiser::<f64>::new_dense(DenoiserConfig::tiny(), 5).unwrap();
    let cfg = pre.config.clone();
    let schedule = NoiseSchedule::linear(cfg.timesteps).unwrap();
    let text: Vec<usize> = (0..cfg.text_len).map(|i| (3 * i + 1) % cfg.vocab).collect();
    let null = 0;
    let opts = SamplerOptions { steps: cfg.timesteps, guidance: Guidance { text: 2.5, image: None }, null_token: null, clip_x0: true };
    let req = SampleRequest { task: TaskId::T2I, text: &text, cond: None, seeds: &[77] };
    let got = sample(&pre, &schedule, &req, &opts, Routing::OnTheFly).unwrap();
    let want = reference_sample(&pre, &schedule, &text, 77, 2.5, null);
    let e = relative_error(got.data(), &want);
    assert!(e < 1e-12, "relative error {e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn routing_weights_lie_on_the_simplex(seed in 0u64..10_000, n in 1usize..9, d in 1usize..9, k in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Tensor::<f64>::randn(&[d], 1.0, &mut rng);
        let p = RouterParams {
            w1: Tensor::randn(&[d, 2 * d], 2.0, &mut rng),
            b1: Tensor::randn(&[2 * d], 1.0, &mut rng),
            w2: Tensor::randn(&[2 * d, n], 2.0, &mut rng),
            b2: Tensor::randn(&[n], 1.0, &mut rng),
        };
        let w = route(&e, &p, None).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        let k = k.min(n);
        let sparse = route(&e, &p, Some(k)).unwrap();
        prop_assert!(sparse.iter().filter(|&&x| x > 0.0).count() <= k);
        prop_assert!((sparse.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_k_equal_to_expert_count_is_full_routing(seed in 0u64..1000, task in task_strategy()) {
        let full = tiny_mtu(seed, 4, None);
        let mut all = full.clone();
        all.mtu.as_mut().unwrap().moe.top_k = Some(4);
        let x = inputs(&full.config, task, 2, seed);
        let a = predict(&full, &x, task, Routing::OnTheFly);
        let b = predict(&all, &x, task, Routing::OnTheFly);
        prop_assert!(bitwise_eq(a.data(), b.data()));
    }

    #[test]
    fn cached_routing_is_bitwise_equal(seed in 0u64..1000, task in task_strategy(), top_k in prop::option::of(1usize..5)) {
        let m = tiny_mtu(seed, 4, top_k);
        let cache = TaskWeightCache::build(&m).unwrap();
        let x = inputs(&m.config, task, 2, seed);
        let a = predict(&m, &x, task, Routing::OnTheFly);
        let b = predict(&m, &x, task, Routing::Cached(&cache));
        prop_assert!(bitwise_eq(a.data(), b.data()));

        let schedule = NoiseSchedule::linear(m.config.timesteps).unwrap();
        let text: Vec<usize> = x.text[..m.config.text_len].to_vec();
        let cond = x.cond.as_ref().map(|c| {
            let per = c.numel() / 2;
            Tensor::new(vec![1, c.shape()[1], c.shape()[2], c.shape()[3]], c.data()[..per].to_vec()).unwrap()
        });
        let req = SampleRequest { task, text: &text, cond: cond.as_ref(), seeds: &[seed] };
        let guidance = Guidance { text: 1.5, image: task.image_conditioned().then_some(1.3) };
        let opts = SamplerOptions { steps: 4, guidance, null_token: 0, clip_x0: true };
        let s1 = sample(&m, &schedule, &req, &opts, Routing::OnTheFly).unwrap();
        let s2 = sample(&m, &schedule, &req, &opts, Routing::Cached(&cache)).unwrap();
        prop_assert!(bitwise_eq(s1.data(), s2.data()));
    }

    #[test]
    fn relabelling_experts_leaves_the_output_unchanged(seed in 0u64..1000, task in task_strategy(), rot in 1usize..4) {
        let n = 4;
        let m = tiny_mtu(seed, n, None);
        let mut p = m.clone();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        for l in 0..m.config.num_blocks {
            for (i, &j) in perm.iter().enumerate() {
                for part in ["w1", "b1", "w2", "b2"] {
                    let src = m.params.tensor(&format!("block{l}.ffn.expert{i}.{part}")).unwrap().clone();
                    p.params.get_mut(&format!("block{l}.ffn.expert{j}.{part}")).unwrap().tensor = src;
                }
            }
            let w2 = m.params.tensor(&format!("block{l}.router.w2")).unwrap();
            let b2 = m.params.tensor(&format!("block{l}.router.b2")).unwrap();
            let rows = w2.shape()[0];
            let (mut nw, mut nb) = (w2.clone(), b2.clone());
            for (i, &j) in perm.iter().enumerate() {
                nb.data_mut()[j] = b2.data()[i];
                for r in 0..rows {
                    nw.data_mut()[r * n + j] = w2.data()[r * n + i];
                }
            }
            p.params.get_mut(&format!("block{l}.router.w2")).unwrap().tensor = nw;
            p.params.get_mut(&format!("block{l}.router.b2")).unwrap().tensor = nb;
        }
        let x = inputs(&m.config, task, 2, seed);
        let a = predict(&m, &x, task, Routing::OnTheFly);
        let b = predict(&p, &x, task, Routing::OnTheFly);
        prop_assert!(relative_error(a.data(), b.data()) < 1e-12);
    }

    #[test]
    fn examples_do_not_interact_within_a_batch(seed in 0u64..1000, task in task_strategy(), batch in 2usize..5) {
        let pre = Denoiser::<f64>::new_dense(DenoiserConfig::tiny(), seed).unwrap();
        let m = prepare_finetune(&pre, task).unwrap();
        let x = inputs(&m.config, task, batch, seed);
        let all = predict(&m, &x, task, Routing::OnTheFly);
        let per = x.z.numel() / batch;
        let tl = m.config.text_len;
        for b in 0..batch {
            let one = |t: &Tensor<f64>| {
                let mut s = t.shape().to_vec();
                s[0] = 1;
                Tensor::new(s, t.data()[b * per..(b + 1) * per].to_vec()).unwrap()
            };
            let xi = Inputs { z: one(&x.z), cond: x.cond.as_ref().map(one), text: x.text[b * tl..(b + 1) * tl].to_vec(), t: vec![x.t[b]] };
            let y = predict(&m, &xi, task, Routing::OnTheFly);
            prop_assert!(relative_error(y.data(), &all.data()[b * per..(b + 1) * per]) < 1e-12);
        }
    }

    #[test]
    fn directional_similarity_ignores_scale_and_offset(
        seed in 0u64..10_000,
        d in 2usize..32,
        scale in 0.01f64..100.0,
        shift in -5.0f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || -> Vec<f64> { (0..d).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (a, b, c, e, g) = (v(), v(), v(), v(), v());
        let tf = |x: &[f64]| -> Vec<f64> { x.iter().map(|v| scale * v + shift).collect() };
        let it = it_directional_similarity(&a, &b, &c, &e).unwrap().value;
        let it2 = it_directional_similarity(&tf(&a), &tf(&b), &tf(&c), &tf(&e)).unwrap().value;
        prop_assert!((it - it2).abs() < 1e-9);
        let ii = ii_directional_similarity(&g, &c, &e).unwrap().value;
        let ii2 = ii_directional_similarity(&tf(&g), &tf(&c), &tf(&e)).unwrap().value;
        prop_assert!((ii - ii2).abs() < 1e-9);
        // the formula is a cosine of two displacement vectors
        let sub = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p - q).collect() };
        prop_assert!((ii - cos(&sub(&g, &c), &sub(&e, &c))).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&it));
    }

    #[test]
    fn deviation_is_a_metric(seed in 0u64..1000) {
        let cfg = DenoiserConfig::tiny();
        let a = Denoiser::<f64>::new_dense(cfg.clone(), seed).unwrap().params;
        let b = Denoiser::<f64>::new_dense(cfg.clone(), seed + 1).unwrap().params;
        let c = Denoiser::<f64>::new_dense(cfg, seed + 2).unwrap().params;
        let ab = frobenius_deviation(&a, &b).unwrap();
        let ba = frobenius_deviation(&b, &a).unwrap();
        let ac = frobenius_deviation(&a, &c).unwrap();
        let cb = frobenius_deviation(&c, &b).unwrap();
        for (name, &d) in &ab {
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, ba[name]);
            prop_assert!(d <= ac[name] + cb[name] + 1e-12);
        }
        prop_assert!(frobenius_deviation(&a, &a).unwrap().values().all(|&d| d == 0.0));
    }

    #[test]
    fn ranks_ignore_per_task_scale(
        values in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 3), 1..5),
        scales in prop::collection::vec(0.01f64..100.0, 3),
    ) {
        let labels = ["SA", "CA", "FFN"];
        let report = |task: TaskId, s: f64| DeviationReport {
            task,
            phi: values
                .iter()
                .enumerate()
                .flat_map(|(l, row)| row.iter().zip(labels).map(move |(v, c)| ((l, c.to_string()), v * s)))
                .collect::<BTreeMap<_, _>>(),
        };
        let tasks = [TaskId::IE, TaskId::SR, TaskId::IP];
        let plain: Vec<_> = tasks.iter().map(|&t| report(t, 1.0)).collect();
        let scaled: Vec<_> = tasks.iter().zip(&scales).map(|(&t, &s)| report(t, s)).collect();
        let r1 = rank_components(&plain).unwrap();
        let r2 = rank_components(&scaled).unwrap();
        for (x, y) in r1.rows.iter().zip(&r2.rows) {
            prop_assert_eq!(x.mean_rank, y.mean_rank);
        }
        for row in &values {
            let scaled_row: Vec<f64> = row.iter().map(|v| v * scales[0]).collect();
            prop_assert_eq!(midranks_desc(row), midranks_desc(&scaled_row));
        }
    }
}
