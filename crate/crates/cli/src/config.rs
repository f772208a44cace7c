//! Run configuration: a TOML file, then `--set section.key=value` overrides,
//! then the dedicated command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mtu_core::optim::AdamWConfig;
use mtu_core::task::parse_task_list;
use mtu_core::train::TrainConfig;
use mtu_core::{DenoiserConfig, MoEConfig, TaskId};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `<task>.<split>.mtud` files; missing files are generated.
    pub dir: PathBuf,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: PathBuf::from("data"), seed: 0, train_count: 2048, val_count: 256, test_count: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub cond_dropout: f64,
    /// Save a resumable checkpoint every this many steps (0: only at the end).
    pub save_every: usize,
    pub optim: AdamWConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection { steps: t.steps, batch_size: t.batch_size, cond_dropout: t.cond_dropout, save_every: 0, optim: t.optim }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
    pub text_scale: f64,
    pub image_scale: Option<f64>,
    pub clip_x0: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { steps: 20, text_scale: 1.0, image_scale: None, clip_x0: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: String,
    /// Evaluate only the first `limit` samples of the split (0: all).
    pub limit: usize,
    pub chunk: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { split: "test".into(), limit: 0, chunk: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub precision: Precision,
    /// Tasks registered when upcycling.
    pub tasks: Vec<String>,
    pub model: DenoiserConfig,
    pub moe: MoEConfig,
    pub train: TrainSection,
    pub data: DataConfig,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            precision: Precision::F32,
            tasks: TaskId::ALL.iter().map(|t| t.to_string()).collect(),
            model: DenoiserConfig::default(),
            moe: MoEConfig::default(),
            train: TrainSection::default(),
            data: DataConfig::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| CliError::Config(format!("empty key in `{path}`")))?;
    let mut table = root;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("`{p}` in `{path}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if given) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.moe.validate()?;
        self.train_config().validate()?;
        self.task_ids()?;
        if self.sample.steps == 0 || self.sample.steps > self.model.timesteps {
            return Err(CliError::Config(format!("sample.steps {} outside [1, {}]", self.sample.steps, self.model.timesteps)));
        }
        if self.eval.chunk == 0 {
            return Err(CliError::Config("eval.chunk must be positive".into()));
        }
        mtu_core::data::Split::parse(&self.eval.split).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn task_ids(&self) -> Result<Vec<TaskId>, CliError> {
        Ok(parse_task_list(&self.tasks.join(","))?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            seed: self.seed,
            cond_dropout: self.train.cond_dropout,
            optim: self.train.optim.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Writes the resolved configuration into the output directory.
    pub fn write_resolved(&self, dir: &Path, name: &str) -> Result<PathBuf, CliError> {
        let path = dir.join(name);
        mtu_core::io::write_atomic(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut c = RunConfig::default();
        c.moe.top_k = Some(2);
        c.sample.image_scale = Some(1.5);
        c.train.optim.lr = 3.3e-4;
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = RunConfig::load(
            None,
            &["train.steps=7".into(), "train.optim.lr=0.01".into(), "tasks=[\"SR\", \"IE\"]".into(), "data.dir=/tmp/x".into()],
        )
        .unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.optim.lr, 0.01);
        assert_eq!(c.task_ids().unwrap(), vec![TaskId::SR, TaskId::IE]);
        assert_eq!(c.data.dir, PathBuf::from("/tmp/x"));
        assert!(matches!(RunConfig::load(None, &["model.heads=5".into()]), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::load(None, &["nonsense=1".into()]), Err(CliError::Config(_))));
    }
}
