//! Subcommand implementations. Each takes a [`Ctx`] and returns the paths
//! and headline numbers it produced, so the same code drives the binary and
//! the integration tests.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mtu_core::accounting::account;
use mtu_core::checkpoint;
use mtu_core::data::dataset::Dataset;
use mtu_core::data::{Generator, Sample, Split, Vocab};
use mtu_core::deviation::{deviation_report, rank_components, router_distribution, router_table, Grouping, RankTable};
use mtu_core::metrics::evaluate as eval_samples;
use mtu_core::report::{fmt_f64, Table};
use mtu_core::sampler::{sample as run_sampler, Guidance, SampleRequest, SamplerOptions};
use mtu_core::train::{prepare_component_ft, prepare_finetune, validation_loss, StepRecord, TaskData, Trainer};
use mtu_core::upcycle::{upcycle as upcycle_model, TaskWeightCache};
use mtu_core::{ComponentClass, DenoiserConfig, Error, Float, MoEConfig, NoiseSchedule, Routing, TaskId, Tensor};

use crate::config::{Precision, RunConfig};
use crate::error::{as_checkpoint, CliError};
use crate::image_io;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// A resolved configuration and an existing output directory.
#[derive(Clone, Debug)]
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> CliResult<Self> {
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| CliError::from(Error::io(&out, e)))?;
        Ok(Ctx { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_config(&self, stem: &str) -> CliResult<()> {
        self.cfg.write_resolved(&self.out, &format!("{stem}.config.toml"))?;
        Ok(())
    }

    fn null_token(&self) -> usize {
        Vocab::builtin().null_id()
    }
}

/// Result of a training subcommand.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub steps: usize,
    /// Validation loss per task before and after training.
    pub val_before: BTreeMap<TaskId, f64>,
    pub val_after: BTreeMap<TaskId, f64>,
}

pub fn dataset_path(dir: &Path, task: TaskId, split: Split) -> PathBuf {
    dir.join(format!("{task}.{}.mtud", split.as_str()))
}

fn split_count(cfg: &RunConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.data.train_count,
        Split::Val => cfg.data.val_count,
        Split::Test => cfg.data.test_count,
    }
}

/// Loads a dataset, generating and saving it first if the file is absent.
pub fn ensure_data(cfg: &RunConfig, model: &DenoiserConfig, task: TaskId, split: Split) -> CliResult<Dataset> {
    let path = dataset_path(&cfg.data.dir, task, split);
    let count = split_count(cfg, split);
    if path.exists() {
        let d = Dataset::load(&path)?;
        if d.image_size != model.image_size || d.text_len != model.text_len || d.seed != cfg.data.seed || d.len() != count {
            return Err(CliError::Data(format!(
                "{} holds {} samples of {}px / {} tokens / seed {}, the run needs {count} of {}px / {} tokens / seed {}",
                path.display(),
                d.len(),
                d.image_size,
                d.text_len,
                d.seed,
                model.image_size,
                model.text_len,
                cfg.data.seed
            )));
        }
        return Ok(d);
    }
    let gen = Generator::new(model.image_size, model.text_len)?;
    let d = Dataset::generate(&gen, task, split, count, cfg.data.seed)?;
    d.save(&path, &gen.vocab)?;
    log::info!("generated {}", path.display());
    Ok(d)
}

fn eval_subset(cfg: &RunConfig, d: &Dataset) -> Vec<Sample> {
    let n = if cfg.eval.limit == 0 { d.len() } else { cfg.eval.limit.min(d.len()) };
    d.samples[..n].to_vec()
}

fn load_model<F: Float>(path: &Path) -> CliResult<checkpoint::Loaded<F>> {
    checkpoint::load::<F>(path).map_err(as_checkpoint)
}

/// Fails with a configuration error when `model` cannot run `task`.
fn check_task<F: Float>(model: &mtu_core::Denoiser<F>, task: TaskId) -> CliResult<()> {
    if let Some(m) = &model.mtu {
        return Ok(m.check_task(task)?);
    }
    if model.tasks().contains(&task) {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{task} needs {} input channels; this dense checkpoint serves {}",
            task.input_channels(model.config.channels),
            mtu_core::task::list_tasks(&model.tasks())
        )))
    }
}

fn val_losses<F: Float>(ctx: &Ctx, model: &mtu_core::Denoiser<F>, tasks: &[TaskId]) -> CliResult<BTreeMap<TaskId, f64>> {
    let mut out = BTreeMap::new();
    for &task in tasks {
        let d = ensure_data(&ctx.cfg, &model.config, task, Split::Val)?;
        let samples = eval_subset(&ctx.cfg, &d);
        let l = validation_loss(model, task, &samples, ctx.null_token(), ctx.cfg.seed, ctx.cfg.eval.chunk)?;
        out.insert(task, l);
    }
    Ok(out)
}

fn step_json(rec: &StepRecord) -> String {
    let losses: serde_json::Map<String, serde_json::Value> =
        rec.losses.iter().map(|(t, l)| (t.to_string(), serde_json::json!(l))).collect();
    serde_json::json!({
        "step": rec.step,
        "loss": losses,
        "lr": rec.lr,
        "grad_norm": rec.grad_norm,
        "wall_secs": rec.wall_secs,
    })
    .to_string()
}

/// Runs `trainer` to `train.steps`, appending one JSON line per step to
/// `<stem>.log.jsonl` and checkpointing every `train.save_every` steps.
fn train_loop<F: Float>(ctx: &Ctx, trainer: &mut Trainer<F>, data: &[TaskData<'_>], stem: &str, fresh: bool) -> CliResult<PathBuf> {
    let stem_path = ctx.path(stem);
    let log_path = ctx.path(&format!("{stem}.log.jsonl"));
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| CliError::from(Error::io(&log_path, e)))?;
    let mut log = BufWriter::new(file);
    let save_every = ctx.cfg.train.save_every;
    let total = trainer.config.steps;
    let mut on_step = |rec: &StepRecord| -> mtu_core::Result<()> {
        writeln!(log, "{}", step_json(rec)).and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))?;
        if rec.step.is_multiple_of(100) || rec.step == total {
            let l: Vec<String> = rec.losses.iter().map(|(t, l)| format!("{t}={l:.5}")).collect();
            log::info!("{stem} step {}/{total} {}", rec.step, l.join(" "));
        }
        Ok(())
    };
    while trainer.steps_done() < total {
        let next = trainer.steps_done().checked_div(save_every).map_or(total, |q| (q + 1) * save_every);
        trainer.run_until(data, next.min(total), &mut on_step)?;
        if trainer.steps_done() < total {
            trainer.save(&stem_path)?;
        }
    }
    Ok(trainer.save(&stem_path)?)
}

fn write_metrics(path: &Path, outcome: &TrainOutcome, extra: &[(&str, String)]) -> CliResult<()> {
    let mut t = Table::new(["metric", "task", "value"]);
    for (task, v) in &outcome.val_before {
        t.push(["val_loss_before".to_string(), task.to_string(), fmt_f64(*v)]);
    }
    for (task, v) in &outcome.val_after {
        t.push(["val_loss_after".to_string(), task.to_string(), fmt_f64(*v)]);
    }
    t.push(["steps".to_string(), String::new(), outcome.steps.to_string()]);
    for (k, v) in extra {
        t.push([k.to_string(), String::new(), v.clone()]);
    }
    Ok(t.write(path)?)
}

macro_rules! dispatch {
    ($ctx:expr, $f:ident ( $($arg:expr),* )) => {
        match $ctx.cfg.precision {
            Precision::F32 => $f::<f32>($ctx, $($arg),*),
            Precision::F64 => $f::<f64>($ctx, $($arg),*),
        }
    };
}

/// Writes train/val/test datasets for every configured task.
pub fn generate_data(ctx: &Ctx) -> CliResult<Vec<PathBuf>> {
    ctx.write_config("generate-data")?;
    let mut paths = Vec::new();
    for task in ctx.cfg.task_ids()? {
        for split in Split::ALL {
            ensure_data(&ctx.cfg, &ctx.cfg.model, task, split)?;
            paths.push(dataset_path(&ctx.cfg.data.dir, task, split));
        }
    }
    Ok(paths)
}

fn load_train(ctx: &Ctx, model: &DenoiserConfig, tasks: &[TaskId]) -> CliResult<Vec<(TaskId, Vec<Sample>)>> {
    tasks.iter().map(|&t| Ok((t, ensure_data(&ctx.cfg, model, t, Split::Train)?.samples))).collect()
}

fn task_data(sets: &[(TaskId, Vec<Sample>)]) -> Vec<TaskData<'_>> {
    sets.iter().map(|(t, s)| TaskData { task: *t, samples: s }).collect()
}

/// Trains `model` (or resumes `resume`) on `tasks` and writes `<stem>.*`.
fn train_model<F: Float>(
    ctx: &Ctx,
    model: Option<mtu_core::Denoiser<F>>,
    resume: Option<&Path>,
    tasks: &[TaskId],
    stem: &str,
) -> CliResult<(TrainOutcome, mtu_core::Denoiser<F>)> {
    ctx.write_config(stem)?;
    let mut trainer = match (model, resume) {
        (_, Some(p)) => Trainer::<F>::resume(p, ctx.cfg.train_config(), ctx.null_token()).map_err(as_checkpoint)?,
        (Some(m), None) => Trainer::new(m, ctx.cfg.train_config(), ctx.null_token())?,
        (None, None) => return Err(CliError::Config("nothing to train: give a checkpoint or --resume".into())),
    };
    for &t in tasks {
        check_task(&trainer.model, t)?;
    }
    let sets = load_train(ctx, &trainer.model.config, tasks)?;
    let val_before = val_losses(ctx, &trainer.model, tasks)?;
    let ckpt = train_loop(ctx, &mut trainer, &task_data(&sets), stem, resume.is_none())?;
    let val_after = val_losses(ctx, &trainer.model, tasks)?;
    let outcome = TrainOutcome { checkpoint: ckpt, steps: trainer.steps_done(), val_before, val_after };
    Ok((outcome, trainer.model))
}

fn pretrain_impl<F: Float>(ctx: &Ctx, resume: Option<&Path>) -> CliResult<TrainOutcome> {
    let model = match resume {
        Some(_) => None,
        None => Some(mtu_core::Denoiser::<F>::new_dense(ctx.cfg.model.clone(), ctx.cfg.seed)?),
    };
    let (outcome, _) = train_model(ctx, model, resume, &[TaskId::T2I], "pretrain")?;
    write_metrics(&ctx.path("pretrain.metrics.csv"), &outcome, &[])?;
    Ok(outcome)
}

/// Dense text-to-image training from a fresh initialization.
pub fn pretrain(ctx: &Ctx, resume: Option<&Path>) -> CliResult<TrainOutcome> {
    dispatch!(ctx, pretrain_impl(resume))
}

fn finetune_impl<F: Float>(
    ctx: &Ctx,
    ckpt: Option<&Path>,
    resume: Option<&Path>,
    task: TaskId,
    class: Option<ComponentClass>,
) -> CliResult<TrainOutcome> {
    let stem = match class {
        None => format!("finetune-{task}"),
        Some(c) => format!("component-{task}-{c}"),
    };
    let model = match (ckpt, resume) {
        (_, Some(_)) => None,
        (Some(p), None) => {
            let pre = load_model::<F>(p)?.model;
            Some(match class {
                None => prepare_finetune(&pre, task)?,
                Some(c) => prepare_component_ft(&pre, task, c)?,
            })
        }
        (None, None) => return Err(CliError::Config("fine-tuning needs --ckpt or --resume".into())),
    };
    let (outcome, model) = train_model(ctx, model, resume, &[task], &stem)?;
    let mut extra = vec![("trainable_params", model.params.num_trainable().to_string())];
    if let Some(c) = class {
        extra.push(("component", c.to_string()));
    }
    write_metrics(&ctx.path(&format!("{stem}.metrics.csv")), &outcome, &extra)?;
    Ok(outcome)
}

/// Single-task fine-tuning of every parameter.
pub fn finetune(ctx: &Ctx, ckpt: Option<&Path>, resume: Option<&Path>, task: TaskId) -> CliResult<TrainOutcome> {
    dispatch!(ctx, finetune_impl(ckpt, resume, task, None))
}

/// Single-task fine-tuning of one component class (plus the input conv).
pub fn component_ft(
    ctx: &Ctx,
    ckpt: Option<&Path>,
    resume: Option<&Path>,
    task: TaskId,
    class: ComponentClass,
) -> CliResult<TrainOutcome> {
    dispatch!(ctx, finetune_impl(ckpt, resume, task, Some(class)))
}

/// Deviation tables produced by `analyze`.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub pooled: RankTable,
    pub individual: RankTable,
    pub ffn_led_layers: (usize, usize),
}

fn analyze_impl<F: Float>(ctx: &Ctx, pre: &Path, fine: &[(TaskId, PathBuf)]) -> CliResult<Analysis> {
    ctx.write_config("analyze")?;
    if fine.is_empty() {
        return Err(CliError::Config("analyze needs at least one --fine TASK=PATH".into()));
    }
    let pre = load_model::<F>(pre)?.model;
    let (mut pooled, mut individual) = (Vec::new(), Vec::new());
    for (task, path) in fine {
        let ft = load_model::<F>(path)?.model;
        if ft.is_mtu() {
            return Err(CliError::Checkpoint(format!("{} is an upcycled model; analyze compares dense checkpoints", path.display())));
        }
        // compare against the pretrained weights with the conv widened by zero channels
        let base = prepare_finetune(&pre, *task)?;
        pooled.push(deviation_report(*task, &ft.params, &base.params, Grouping::Pooled)?);
        individual.push(deviation_report(*task, &ft.params, &base.params, Grouping::Individual)?);
    }
    let pooled = rank_components(&pooled)?;
    let individual = rank_components(&individual)?;
    pooled.to_table().write(&ctx.path("deviation-pooled.csv"))?;
    individual.to_table().write(&ctx.path("deviation-individual.csv"))?;
    let mut summary = Table::new(["component", "layers_led", "layers"]);
    for c in ComponentClass::ALL {
        let (led, total) = pooled.layers_led_by(c.as_str());
        summary.push([c.to_string(), led.to_string(), total.to_string()]);
    }
    summary.write(&ctx.path("deviation-summary.csv"))?;
    let ffn_led_layers = pooled.layers_led_by(ComponentClass::FFN.as_str());
    Ok(Analysis { pooled, individual, ffn_led_layers })
}

/// Per-layer deviation of fine-tuned checkpoints from the pretrained one.
pub fn analyze(ctx: &Ctx, pre: &Path, fine: &[(TaskId, PathBuf)]) -> CliResult<Analysis> {
    dispatch!(ctx, analyze_impl(pre, fine))
}

fn upcycle_impl<F: Float>(ctx: &Ctx, pre: &Path, moe: &MoEConfig, stem: &str) -> CliResult<PathBuf> {
    ctx.write_config(stem)?;
    let dense = load_model::<F>(pre)?.model;
    let tasks = ctx.cfg.task_ids()?;
    let m = upcycle_model(&dense, &tasks, moe, ctx.cfg.seed)?;
    let path = ctx.path(&format!("{stem}.ckpt"));
    checkpoint::save(&m, &path, &[("seed", ctx.cfg.seed.to_string())])?;
    let (a, b) = (dense.params.num_params(), m.params.num_params());
    log::info!("upcycled {a} -> {b} parameters ({:+.3}%)", 100.0 * (b as f64 - a as f64) / a as f64);
    let ffn = |t: &mtu_core::ParamTree<F>| t.iter().filter(|(n, _)| n.contains(".ffn.")).map(|(_, e)| e.tensor.numel()).sum::<usize>();
    let surplus = ffn(&m.params) as f64 - ffn(&dense.params) as f64;
    log::info!("expert parameters exceed the dense FFNs by {surplus} ({:.3}% of the total)", 100.0 * surplus / b as f64);
    Ok(path)
}

/// Converts a dense checkpoint into an MTU model for the configured tasks.
pub fn upcycle(ctx: &Ctx, pre: &Path) -> CliResult<PathBuf> {
    let moe = ctx.cfg.moe.clone();
    dispatch!(ctx, upcycle_impl(pre, &moe, "mtu-init"))
}

fn train_mtu_impl<F: Float>(ctx: &Ctx, ckpt: Option<&Path>, resume: Option<&Path>, stem: &str) -> CliResult<TrainOutcome> {
    let model = match (ckpt, resume) {
        (_, Some(_)) => None,
        (Some(p), None) => Some(load_model::<F>(p)?.model),
        (None, None) => return Err(CliError::Config("train-mtu needs --ckpt or --resume".into())),
    };
    if let Some(m) = &model {
        if !m.is_mtu() {
            return Err(CliError::Checkpoint("train-mtu needs an upcycled checkpoint; run `upcycle` first".into()));
        }
    }
    let tasks = match (&model, resume) {
        (Some(m), _) => m.tasks(),
        (None, Some(p)) => load_model::<F>(p)?.model.tasks(),
        (None, None) => unreachable!(),
    };
    let (outcome, model) = train_model(ctx, model, resume, &tasks, stem)?;
    router_table(&router_distribution(&model)?).write(&ctx.path(&format!("{stem}.router.csv")))?;
    write_metrics(&ctx.path(&format!("{stem}.metrics.csv")), &outcome, &[])?;
    Ok(outcome)
}

/// Joint multi-task training of an upcycled checkpoint.
pub fn train_mtu(ctx: &Ctx, ckpt: Option<&Path>, resume: Option<&Path>) -> CliResult<TrainOutcome> {
    dispatch!(ctx, train_mtu_impl(ckpt, resume, "mtu"))
}

/// Inputs of `sample`.
#[derive(Clone, Debug, Default)]
pub struct SampleArgs {
    pub task: Option<TaskId>,
    pub prompt: String,
    pub cond: Option<PathBuf>,
    pub count: usize,
}

fn sample_impl<F: Float>(ctx: &Ctx, ckpt: &Path, args: &SampleArgs) -> CliResult<Vec<PathBuf>> {
    ctx.write_config("sample")?;
    let model = load_model::<F>(ckpt)?.model;
    let task = args.task.unwrap_or(TaskId::T2I);
    check_task(&model, task)?;
    let cfg = &model.config;
    let count = args.count.max(1);
    let vocab = Vocab::builtin();
    let prompt = vocab.encode(&args.prompt, cfg.text_len)?;
    let text: Vec<usize> = prompt.iter().copied().cycle().take(count * cfg.text_len).collect();
    let cond: Option<Tensor<F>> = match (task.image_conditioned(), &args.cond) {
        (true, Some(p)) => {
            let img = image_io::read_ppm(p)?;
            if img.shape() != [cfg.channels, cfg.image_size, cfg.image_size] {
                return Err(CliError::Data(format!(
                    "{}: condition image is {:?}, the model expects {}x{}",
                    p.display(),
                    &img.shape()[1..],
                    cfg.image_size,
                    cfg.image_size
                )));
            }
            let data: Vec<F> = img.data().iter().map(|&v| F::from_f64(v as f64)).collect::<Vec<_>>().repeat(count);
            Some(Tensor::new(vec![count, cfg.channels, cfg.image_size, cfg.image_size], data)?)
        }
        (true, None) => return Err(CliError::Config(format!("{task} needs --cond <image.ppm>"))),
        (false, Some(_)) => return Err(CliError::Config(format!("{task} takes no condition image"))),
        (false, None) => None,
    };
    let seeds: Vec<u64> = (0..count as u64).map(|i| ctx.cfg.seed.wrapping_add(i)).collect();
    let opts = sampler_options(ctx, task);
    let schedule = NoiseSchedule::linear(cfg.timesteps)?;
    let cache = if model.is_mtu() { Some(TaskWeightCache::build(&model)?) } else { None };
    let routing = cache.as_ref().map_or(Routing::OnTheFly, Routing::Cached);
    let req = SampleRequest { task, text: &text, cond: cond.as_ref(), seeds: &seeds };
    let out = run_sampler(&model, &schedule, &req, &opts, routing)?;
    let per = out.numel() / count;
    let mut imgs = Vec::with_capacity(count);
    let mut paths = Vec::with_capacity(count + 1);
    for i in 0..count {
        let img = image_io::to_rgb(&out.data()[i * per..(i + 1) * per], cfg.image_size)?;
        let path = ctx.path(&format!("sample-{task}-{i}.ppm"));
        image_io::write_ppm(&img, &path)?;
        paths.push(path);
        imgs.push(img);
    }
    let grid = ctx.path(&format!("sample-{task}-grid.ppm"));
    image_io::write_ppm(&image_io::grid(&imgs)?, &grid)?;
    paths.push(grid);
    Ok(paths)
}

fn sampler_options(ctx: &Ctx, task: TaskId) -> SamplerOptions {
    let s = &ctx.cfg.sample;
    SamplerOptions {
        steps: s.steps,
        guidance: Guidance { text: s.text_scale, image: if task.image_conditioned() { s.image_scale } else { None } },
        null_token: ctx.null_token(),
        clip_x0: s.clip_x0,
    }
}

/// Generates images from a checkpoint; the checkpoint is only read.
pub fn sample(ctx: &Ctx, ckpt: &Path, args: &SampleArgs) -> CliResult<Vec<PathBuf>> {
    dispatch!(ctx, sample_impl(ckpt, args))
}

/// Headline numbers of `evaluate`.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub task: TaskId,
    pub val_loss: f64,
    pub mean_mse: f64,
    pub psnr: f64,
    pub mean_ii: Option<f64>,
    pub mean_it: Option<f64>,
}

fn evaluate_impl<F: Float>(ctx: &Ctx, ckpt: &Path, task: TaskId) -> CliResult<Evaluation> {
    ctx.write_config(&format!("evaluate-{task}"))?;
    let model = load_model::<F>(ckpt)?.model;
    check_task(&model, task)?;
    let split = Split::parse(&ctx.cfg.eval.split)?;
    let d = ensure_data(&ctx.cfg, &model.config, task, split)?;
    let samples = eval_subset(&ctx.cfg, &d);
    let vocab = Vocab::builtin();
    let opts = sampler_options(ctx, task);
    let report = eval_samples(&model, task, &samples, &opts, &vocab, ctx.cfg.seed, ctx.cfg.eval.chunk)?;
    report.to_table().write(&ctx.path(&format!("evaluate-{task}.csv")))?;
    let val_loss = validation_loss(&model, task, &samples, ctx.null_token(), ctx.cfg.seed, ctx.cfg.eval.chunk)?;
    let e = Evaluation {
        task,
        val_loss,
        mean_mse: report.mean_mse(),
        psnr: report.psnr_of_mean_mse(),
        mean_ii: report.mean_ii(),
        mean_it: report.mean_it(),
    };
    let mut t = Table::new(["metric", "value"]).comment(mtu_core::metrics::METRIC_NOTE);
    t.push(["split".to_string(), split.as_str().to_string()]);
    t.push(["samples".to_string(), samples.len().to_string()]);
    t.push(["val_loss".to_string(), fmt_f64(e.val_loss)]);
    t.push(["mse".to_string(), fmt_f64(e.mean_mse)]);
    t.push(["psnr".to_string(), fmt_f64(e.psnr)]);
    t.push(["ii_similarity".to_string(), e.mean_ii.map_or(String::new(), fmt_f64)]);
    t.push(["it_similarity".to_string(), e.mean_it.map_or(String::new(), fmt_f64)]);
    t.write(&ctx.path(&format!("evaluate-{task}.summary.csv")))?;
    Ok(e)
}

/// Samples a split and scores it against the ground truth.
pub fn evaluate(ctx: &Ctx, ckpt: &Path, task: TaskId) -> CliResult<Evaluation> {
    dispatch!(ctx, evaluate_impl(ckpt, task))
}

/// One row of `flops.csv`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsRow {
    pub task: TaskId,
    pub total_params: u64,
    pub trainable_params: u64,
    pub flops: u64,
    pub ffn_flops: u64,
}

fn flops_impl<F: Float>(ctx: &Ctx, ckpt: &Path) -> CliResult<Vec<FlopsRow>> {
    ctx.write_config("flops")?;
    let model = load_model::<F>(ckpt)?.model;
    let mut summary = Table::new(["task", "total_params", "trainable_params", "flops", "ffn_flops"]);
    let mut rows = Vec::new();
    for task in model.tasks() {
        let r = account(&model, task)?;
        r.to_table().write(&ctx.path(&format!("flops-{task}.csv")))?;
        let row = FlopsRow {
            task,
            total_params: r.total_params,
            trainable_params: r.trainable_params,
            flops: r.flops,
            ffn_flops: r.row("FFN").1,
        };
        summary.push([
            task.to_string(),
            row.total_params.to_string(),
            row.trainable_params.to_string(),
            row.flops.to_string(),
            row.ffn_flops.to_string(),
        ]);
        rows.push(row);
    }
    summary.write(&ctx.path("flops.csv"))?;
    Ok(rows)
}

/// Parameter and FLOP accounting for every task a checkpoint serves.
pub fn flops(ctx: &Ctx, ckpt: &Path) -> CliResult<Vec<FlopsRow>> {
    dispatch!(ctx, flops_impl(ckpt))
}

/// One trained layout of `ablate-experts`.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub experts: usize,
    pub top_k: Option<usize>,
    pub task: TaskId,
    pub val_loss: f64,
    pub ffn_flops: u64,
    pub total_params: u64,
}

fn ablate_impl<F: Float>(ctx: &Ctx, pre: &Path, experts: &[usize], top_ks: &[Option<usize>]) -> CliResult<Vec<AblationRow>> {
    ctx.write_config("ablate-experts")?;
    let mut rows = Vec::new();
    let mut table = Table::new(["experts", "top_k", "task", "val_loss", "ffn_flops", "total_params"]);
    for &n in experts {
        for &k in top_ks {
            if k.is_some_and(|k| k > n) {
                continue;
            }
            let kname = k.map_or("all".to_string(), |k| k.to_string());
            let moe = MoEConfig { experts: n, top_k: k, ..ctx.cfg.moe.clone() };
            let stem = format!("ablate-n{n}-k{kname}");
            let init = upcycle_impl::<F>(ctx, pre, &moe, &format!("{stem}-init"))?;
            let outcome = train_mtu_impl::<F>(ctx, Some(&init), None, &stem)?;
            let model = load_model::<F>(&outcome.checkpoint)?.model;
            for (task, loss) in &outcome.val_after {
                let acc = account(&model, *task)?;
                let row = AblationRow {
                    experts: n,
                    top_k: k,
                    task: *task,
                    val_loss: *loss,
                    ffn_flops: acc.row("FFN").1,
                    total_params: acc.total_params,
                };
                table.push([
                    n.to_string(),
                    kname.clone(),
                    task.to_string(),
                    fmt_f64(row.val_loss),
                    row.ffn_flops.to_string(),
                    row.total_params.to_string(),
                ]);
                rows.push(row);
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::Config("no (experts, top_k) pair with top_k <= experts".into()));
    }
    table.write(&ctx.path("ablation.csv"))?;
    Ok(rows)
}

/// Upcycles and trains one MTU model per (experts, top_k) pair.
pub fn ablate_experts(ctx: &Ctx, pre: &Path, experts: &[usize], top_ks: &[Option<usize>]) -> CliResult<Vec<AblationRow>> {
    dispatch!(ctx, ablate_impl(pre, experts, top_ks))
}
