//! Finite-difference checks for every differentiable op on the tape.

use std::collections::BTreeMap;

use mtu_core::data::{Generator, Sample, Split, Vocab};
use mtu_core::diffusion::{diffusion_loss, eval_batch, mtu_loss, ConditioningBatch};
use mtu_core::train::prepare_finetune;
use mtu_core::upcycle::upcycle;
use mtu_core::{BindMode, Bound, Denoiser, DenoiserConfig, MoEConfig, NoiseSchedule, Routing, TaskId};
use mtu_core::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

/// Five-point central difference of `f` at `x` along coordinate `i`.
fn numeric_partial(f: &dyn Fn(&[Tensor<f64>]) -> f64, inputs: &[Tensor<f64>], which: usize, i: usize) -> f64 {
    let h = 1e-4;
    let eval = |delta: f64| {
        let mut xs = inputs.to_vec();
        xs[which].data_mut()[i] += delta;
        f(&xs)
    };
    (8.0 * (eval(h) - eval(-h)) - (eval(2.0 * h) - eval(-2.0 * h))) / (12.0 * h)
}

/// Builds `sum(op(inputs) * R)` with a fixed random projection `R`.
fn check<Op>(inputs: Vec<Tensor<f64>>, seed: u64, op: Op)
where
    Op: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
{
    let projection = |tape: &Tape<f64>, out: Var<'_, f64>| -> f64 {
        let shape = out.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let r = tape.constant(&Tensor::randn(&shape, 1.0, &mut rng)).unwrap();
        out.mul(&r).unwrap().sum().unwrap().item()
    };
    let f = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x).unwrap()).collect();
        let out = op(&vars);
        projection(&tape, out)
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(x).unwrap()).collect();
    let out = op(&vars);
    let shape = out.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = tape.constant(&Tensor::randn(&shape, 1.0, &mut rng)).unwrap();
    let loss = out.mul(&r).unwrap().sum().unwrap();
    let grads = tape.backward(loss).unwrap();

    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for (i, &a) in analytic.iter().enumerate() {
            let n = numeric_partial(&f, &inputs, which, i);
            let rel = (a - n).abs() / (n.abs() + 1e-8);
            assert!(rel < TOL, "input {which} coord {i}: analytic {a} numeric {n} rel {rel}");
        }
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

#[test]
fn elementwise_ops() {
    check(vec![randn(&[3, 4], 1), randn(&[3, 4], 2)], 10, |v| v[0].add(&v[1]).unwrap());
    check(vec![randn(&[3, 4], 1), randn(&[3, 4], 2)], 11, |v| v[0].sub(&v[1]).unwrap());
    check(vec![randn(&[3, 4], 1), randn(&[3, 4], 2)], 12, |v| v[0].mul(&v[1]).unwrap());
    check(vec![randn(&[5], 3)], 13, |v| v[0].scale(-1.7).unwrap());
    check(vec![randn(&[3, 4], 4), randn(&[4], 5)], 14, |v| v[0].add_bias(&v[1]).unwrap());
    check(vec![randn(&[2, 3], 6)], 15, |v| v[0].reshape(&[3, 2]).unwrap());
}

#[test]
fn matmul_and_linear() {
    check(vec![randn(&[3, 5], 1), randn(&[5, 2], 2)], 20, |v| v[0].matmul(&v[1]).unwrap());
    check(vec![randn(&[4, 3], 3), randn(&[3, 6], 4), randn(&[6], 5)], 21, |v| {
        v[0].linear(&v[1], Some(&v[2])).unwrap()
    });
}

#[test]
fn activations() {
    // keep inputs away from the ReLU kink
    let mut x = randn(&[4, 5], 7);
    for v in x.data_mut() {
        if v.abs() < 1e-2 {
            *v += 0.1;
        }
    }
    check(vec![x], 30, |v| v[0].relu().unwrap());
    check(vec![randn(&[4, 5], 8).reshape(&[20]).unwrap()], 31, |v| v[0].gelu().unwrap());
    check(vec![randn(&[3, 6], 9)], 32, |v| v[0].softmax().unwrap());
}

#[test]
fn layer_norm() {
    check(vec![randn(&[4, 6], 1), randn(&[6], 2), randn(&[6], 3)], 40, |v| {
        v[0].layer_norm(&v[1], &v[2]).unwrap()
    });
}

#[test]
fn gather_and_embedding() {
    check(vec![randn(&[5, 3], 1)], 50, |v| v[0].embedding(&[4, 0, 4, 2]).unwrap());
    check(vec![randn(&[6], 2)], 51, |v| v[0].gather(vec![5, 5, 1, 0], &[2, 2]).unwrap());
}

#[test]
fn conv2d() {
    check(
        vec![randn(&[2, 3, 5, 4], 1), randn(&[4, 3, 3, 3], 2), randn(&[4], 3)],
        60,
        |v| v[0].conv2d(&v[1], &v[2], 1).unwrap(),
    );
    check(
        vec![randn(&[1, 2, 4, 4], 4), randn(&[3, 2, 3, 3], 5), randn(&[3], 6)],
        61,
        |v| v[0].conv2d(&v[1], &v[2], 0).unwrap(),
    );
}

#[test]
fn concat_channels() {
    check(vec![randn(&[2, 1, 3, 3], 1), randn(&[2, 2, 3, 3], 2)], 70, |v| {
        v[0].concat_channels(&v[1]).unwrap()
    });
}

#[test]
fn attention() {
    // batch 2, 3 queries and 4 keys per example, 2 heads of width 3
    check(vec![randn(&[6, 6], 1), randn(&[8, 6], 2), randn(&[8, 6], 3)], 80, |v| {
        v[0].attention(&v[1], &v[2], 2, 2).unwrap()
    });
}

#[test]
fn routing_ops() {
    check(vec![randn(&[3, 4], 1), randn(&[5], 2)], 90, |v| v[0].scale_by_elem(&v[1], 3).unwrap());
    check(vec![randn(&[5], 3)], 91, |v| v[0].softmax().unwrap().top_k_renorm(3).unwrap());
    check(vec![randn(&[6], 4)], 92, |v| v[0].softmax_canonical().unwrap());
    check(vec![randn(&[6], 5)], 93, |v| v[0].softmax_canonical().unwrap().top_k_renorm(2).unwrap());
}

/// Finite differences of a whole-model loss at `per_tensor` random
/// coordinates of every trainable tensor.
fn check_model_loss<L>(model: &mut Denoiser<f64>, per_tensor: usize, seed: u64, loss: L)
where
    L: for<'t, 'p> Fn(&Denoiser<f64>, &Bound<'t, 'p, f64>) -> Var<'t, f64>,
{
    let value = |m: &Denoiser<f64>| {
        let tape = Tape::new();
        let bound = Bound::new(&tape, &m.params, BindMode::Inference);
        loss(m, &bound).item()
    };
    let grads: BTreeMap<String, Vec<f64>> = {
        let tape = Tape::new();
        let bound = Bound::new(&tape, &model.params, BindMode::Train);
        let l = loss(model, &bound);
        let g = tape.backward(l).unwrap();
        bound.collect_grads(&g).into_iter().collect()
    };
    let names: Vec<String> = model.params.iter().filter(|(_, e)| !e.frozen).map(|(n, _)| n.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;
    for name in names {
        // a tensor outside the graph (an expert no task selects) has zero gradient
        let numel = model.params.tensor(&name).unwrap().numel();
        let g = grads.get(&name).cloned().unwrap_or_else(|| vec![0.0; numel]);
        for _ in 0..per_tensor {
            let i = rng.random_range(0..g.len());
            let mut at = |delta: f64| {
                let orig = model.params.tensor(&name).unwrap().data()[i];
                model.params.get_mut(&name).unwrap().tensor.data_mut()[i] = orig + delta;
                let v = value(model);
                model.params.get_mut(&name).unwrap().tensor.data_mut()[i] = orig;
                v
            };
            let n = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            let rel = (g[i] - n).abs() / g[i].abs().max(n.abs()).max(1e-6);
            assert!(rel < TOL, "{name}[{i}]: analytic {} numeric {n} rel {rel}", g[i]);
        }
    }
}

fn tiny_batch(task: TaskId, cfg: &DenoiserConfig, schedule: &NoiseSchedule, seed: u64) -> ConditioningBatch<f64> {
    let gen = Generator::new(cfg.image_size, cfg.text_len).unwrap();
    let samples = gen.generate(task, Split::Train, 2, seed).unwrap();
    let refs: Vec<&Sample> = samples.iter().collect();
    eval_batch(task, &refs, schedule, Vocab::builtin().null_id(), seed + 1).unwrap()
}

#[test]
fn dense_diffusion_loss() {
    let cfg = DenoiserConfig::tiny();
    let schedule = NoiseSchedule::linear(cfg.timesteps).unwrap();
    let pre = Denoiser::<f64>::new_dense(cfg.clone(), 11).unwrap();
    for task in [TaskId::T2I, TaskId::SR] {
        let mut model = prepare_finetune(&pre, task).unwrap();
        let batch = tiny_batch(task, &cfg, &schedule, 12);
        check_model_loss(&mut model, 2, 13, |m, b| diffusion_loss(m, b, &batch, &schedule, Routing::OnTheFly).unwrap());
    }
}

#[test]
fn multi_task_loss_with_top_k() {
    let cfg = DenoiserConfig::tiny();
    let schedule = NoiseSchedule::linear(cfg.timesteps).unwrap();
    let pre = Denoiser::<f64>::new_dense(cfg.clone(), 21).unwrap();
    let moe = MoEConfig { experts: 4, top_k: Some(2), d_task: 4, iso_parameter: true };
    let tasks = [TaskId::T2I, TaskId::IE];
    let mut model = upcycle(&pre, &tasks, &moe, 22).unwrap();
    // move the router off its uniform start so the selection is strict
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (name, e) in model.params.iter_mut() {
        if name.contains(".router.") {
            for v in e.tensor.data_mut() {
                *v += rng.random_range(-1.0..1.0);
            }
        }
    }
    let batches: Vec<_> = tasks.iter().map(|&t| tiny_batch(t, &cfg, &schedule, 24)).collect();
    check_model_loss(&mut model, 2, 25, |m, b| mtu_loss(m, b, &batches, &schedule).unwrap().0);
}

#[test]
fn reductions_and_losses() {
    check(vec![randn(&[3, 4], 1)], 100, |v| v[0].sum().unwrap());
    check(vec![randn(&[3, 4], 2)], 101, |v| v[0].mean().unwrap());
    check(vec![randn(&[3, 4], 3), randn(&[3, 4], 4)], 102, |v| v[0].mse(&v[1]).unwrap());
    check(vec![randn(&[3, 5], 5)], 103, |v| v[0].cross_entropy(&[0, 4, 2]).unwrap());
}

#[test]
fn composite_graph() {
    // a miniature transformer step: norm, attention, residual, MLP
    check(
        vec![randn(&[4, 4], 1), randn(&[4], 2), randn(&[4], 3), randn(&[4, 4], 4), randn(&[4, 8], 5), randn(&[8, 4], 6)],
        110,
        |v| {
            let h = v[0].layer_norm(&v[1], &v[2]).unwrap();
            let q = h.matmul(&v[3]).unwrap();
            let a = q.attention(&h, &h, 2, 2).unwrap();
            let x = v[0].add(&a).unwrap();
            let m = x.matmul(&v[4]).unwrap().gelu().unwrap().matmul(&v[5]).unwrap();
            x.add(&m).unwrap()
        },
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&randn(&[rows, cols], seed)).unwrap();
        let y = x.scale(5.0).unwrap().softmax().unwrap().value();
        for row in y.chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let run = || {
            let tape = Tape::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = tape.constant(&Tensor::randn(&[8, 8], 1.0, &mut rng)).unwrap();
            let k = tape.constant(&Tensor::randn(&[8, 8], 1.0, &mut rng)).unwrap();
            q.attention(&k, &k, 2, 4).unwrap().gelu().unwrap().value()
        };
        let a = run();
        let b = run();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
