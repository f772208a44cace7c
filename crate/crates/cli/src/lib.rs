//! The `mtu` experiment driver.

pub mod commands;
pub mod config;
pub mod error;
pub mod image_io;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use mtu_core::{ComponentClass, TaskId};

use crate::commands::{Ctx, SampleArgs};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mtu", version, about = "Train, upcycle, analyze and sample toy multi-task diffusion models")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides any configuration key, e.g. `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/val/test datasets for the configured tasks.
    GenerateData,
    /// Train the dense text-to-image model from scratch.
    Pretrain {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a dense checkpoint on one task.
    Finetune {
        #[arg(long, required_unless_present = "resume")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        task: TaskId,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune only one component class (SA, CA or FFN) on one task.
    ComponentFt {
        #[arg(long, required_unless_present = "resume")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        task: TaskId,
        #[arg(long)]
        component: ComponentClass,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Deviation of fine-tuned checkpoints from the pretrained one.
    Analyze {
        #[arg(long)]
        pre: PathBuf,
        /// `TASK=PATH`, repeatable.
        #[arg(long = "fine", value_name = "TASK=PATH", value_parser = parse_fine, required = true)]
        fine: Vec<(TaskId, PathBuf)>,
    },
    /// Convert a dense checkpoint into a multi-task expert model.
    Upcycle {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train an upcycled model on all of its tasks.
    TrainMtu {
        #[arg(long, required_unless_present = "resume")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate images.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "T2I")]
        task: TaskId,
        #[arg(long, default_value = "")]
        prompt: String,
        /// Condition image (binary PPM) for image-conditioned tasks.
        #[arg(long)]
        cond: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        text_scale: Option<f64>,
        #[arg(long)]
        image_scale: Option<f64>,
    },
    /// Sample a dataset split and score it.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: TaskId,
        #[arg(long)]
        split: Option<String>,
    },
    /// Parameter and FLOP accounting.
    Flops {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Upcycle and train one model per expert count and top-k.
    AblateExperts {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        experts: Vec<usize>,
        /// `all` keeps every expert.
        #[arg(long = "top-k", value_delimiter = ',', value_parser = parse_top_k, default_value = "all")]
        top_k: Vec<Option<usize>>,
    },
}

fn parse_fine(s: &str) -> Result<(TaskId, PathBuf), String> {
    let (t, p) = s.split_once('=').ok_or_else(|| format!("`{s}` is not TASK=PATH"))?;
    Ok((t.parse().map_err(|e: mtu_core::Error| e.to_string())?, PathBuf::from(p)))
}

fn parse_top_k(s: &str) -> Result<Option<usize>, String> {
    match s {
        "all" | "none" => Ok(None),
        k => k.parse().map(Some).map_err(|_| format!("`{k}` is not a count or `all`")),
    }
}

impl Cli {
    /// Resolved configuration: file, then `--set`, then dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.set.clone();
        match &self.command {
            Command::Sample { steps, text_scale, image_scale, .. } => {
                overrides.extend(steps.map(|v| format!("sample.steps={v}")));
                overrides.extend(text_scale.map(|v| format!("sample.text_scale={v:?}")));
                overrides.extend(image_scale.map(|v| format!("sample.image_scale={v:?}")));
            }
            Command::Evaluate { split: Some(s), .. } => overrides.push(format!("eval.split=\"{s}\"")),
            _ => {}
        }
        let mut cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let ctx = Ctx::new(cli.resolve()?)?;
    match &cli.command {
        Command::GenerateData => {
            for p in commands::generate_data(&ctx)? {
                println!("{}", p.display());
            }
        }
        Command::Pretrain { resume } => report_train(commands::pretrain(&ctx, resume.as_deref())?),
        Command::Finetune { ckpt, task, resume } => {
            report_train(commands::finetune(&ctx, ckpt.as_deref(), resume.as_deref(), *task)?)
        }
        Command::ComponentFt { ckpt, task, component, resume } => {
            report_train(commands::component_ft(&ctx, ckpt.as_deref(), resume.as_deref(), *task, *component)?)
        }
        Command::Analyze { pre, fine } => {
            let a = commands::analyze(&ctx, pre, fine)?;
            println!("FFN has the largest mean deviation rank in {} of {} layers", a.ffn_led_layers.0, a.ffn_led_layers.1);
        }
        Command::Upcycle { ckpt } => println!("{}", commands::upcycle(&ctx, ckpt)?.display()),
        Command::TrainMtu { ckpt, resume } => report_train(commands::train_mtu(&ctx, ckpt.as_deref(), resume.as_deref())?),
        Command::Sample { ckpt, task, prompt, cond, count, .. } => {
            let args = SampleArgs { task: Some(*task), prompt: prompt.clone(), cond: cond.clone(), count: *count };
            for p in commands::sample(&ctx, ckpt, &args)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate { ckpt, task, .. } => {
            let e = commands::evaluate(&ctx, ckpt, *task)?;
            println!("{} val_loss {:.6} mse {:.6} psnr {:.3}", e.task, e.val_loss, e.mean_mse, e.psnr);
        }
        Command::Flops { ckpt } => {
            for r in commands::flops(&ctx, ckpt)? {
                println!("{} params {} flops {} ffn_flops {}", r.task, r.total_params, r.flops, r.ffn_flops);
            }
        }
        Command::AblateExperts { ckpt, experts, top_k } => {
            for r in commands::ablate_experts(&ctx, ckpt, experts, top_k)? {
                let k = r.top_k.map_or("all".into(), |k| k.to_string());
                println!("N={} k={k} {} val_loss {:.6} ffn_flops {}", r.experts, r.task, r.val_loss, r.ffn_flops);
            }
        }
    }
    Ok(())
}

fn report_train(o: commands::TrainOutcome) {
    println!("{} after {} steps", o.checkpoint.display(), o.steps);
    for (task, after) in &o.val_after {
        println!("{task} val_loss {:.6} -> {after:.6}", o.val_before[task]);
    }
}
