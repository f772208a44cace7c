//! Model checkpoints: configuration and layout in the manifest, one tensor
//! record per parameter carrying its component tag and frozen flag.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::{DenoiserConfig, MoEConfig};
use crate::error::{Error, Result};
use crate::io::{Container, ContainerWriter};
use crate::model::{init_dense, Denoiser, MtuLayout};
use crate::params::{ParamEntry, ParamTree};
use crate::task::{list_tasks, parse_task_list};
use crate::tensor::{DType, Float};
use crate::upcycle::upcycle;

pub const CHECKPOINT_MAGIC: &str = "MTUCKPT1";

/// A loaded model plus the free-form metadata saved next to it.
#[derive(Clone, Debug)]
pub struct Loaded<F: Float> {
    pub model: Denoiser<F>,
    pub meta: BTreeMap<String, String>,
    /// Precision the parameters were stored in.
    pub stored_dtype: DType,
}

fn config_fields(c: &DenoiserConfig) -> [(&'static str, usize); 12] {
    [
        ("image_size", c.image_size),
        ("channels", c.channels),
        ("num_blocks", c.num_blocks),
        ("d_model", c.d_model),
        ("d_ffn", c.d_ffn),
        ("heads", c.heads),
        ("d_text", c.d_text),
        ("vocab", c.vocab),
        ("text_len", c.text_len),
        ("timesteps", c.timesteps),
        ("stem_channels", c.stem_channels),
        ("patch_size", c.patch_size),
    ]
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Writes `model` atomically. `extra` entries land in the manifest under `extra.<key>`.
pub fn save<F: Float>(model: &Denoiser<F>, path: &Path, extra: &[(&str, String)]) -> Result<()> {
    let mut w = ContainerWriter::new(CHECKPOINT_MAGIC);
    w.meta("dtype", F::DTYPE.as_str());
    for (k, v) in config_fields(&model.config) {
        w.meta(&format!("config.{k}"), v);
    }
    match &model.mtu {
        None => {
            w.meta("kind", "dense");
        }
        Some(m) => {
            w.meta("kind", "mtu")
                .meta("tasks", list_tasks(&m.tasks))
                .meta("moe.experts", m.moe.experts)
                .meta("moe.top_k", m.moe.top_k.map_or("none".to_string(), |k| k.to_string()))
                .meta("moe.d_task", m.moe.d_task)
                .meta("moe.iso_parameter", m.moe.iso_parameter);
        }
    }
    for (k, v) in extra {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(bad(format!("metadata `{k}` must be a single token with a single-line value")));
        }
        w.meta(&format!("extra.{k}"), v);
    }
    for (name, e) in model.params.iter() {
        let attrs = vec![
            ("component".to_string(), e.component.to_string()),
            ("frozen".to_string(), e.frozen.to_string()),
        ];
        w.tensor(name, &e.tensor, attrs)?;
    }
    w.write(path)
}

fn parse_num<T: std::str::FromStr>(c: &Container, key: &str) -> Result<T> {
    let v = c.meta(key)?;
    v.parse().map_err(|_| bad(format!("meta `{key}` has unparsable value `{v}`")))
}

fn read_config(c: &Container) -> Result<DenoiserConfig> {
    let mut cfg = DenoiserConfig::default();
    let set = |k: &str| parse_num::<usize>(c, &format!("config.{k}"));
    cfg.image_size = set("image_size")?;
    cfg.channels = set("channels")?;
    cfg.num_blocks = set("num_blocks")?;
    cfg.d_model = set("d_model")?;
    cfg.d_ffn = set("d_ffn")?;
    cfg.heads = set("heads")?;
    cfg.d_text = set("d_text")?;
    cfg.vocab = set("vocab")?;
    cfg.text_len = set("text_len")?;
    cfg.timesteps = set("timesteps")?;
    cfg.stem_channels = set("stem_channels")?;
    cfg.patch_size = set("patch_size")?;
    cfg.validate().map_err(|e| bad(format!("stored config is invalid: {e}")))?;
    Ok(cfg)
}

fn read_layout(c: &Container) -> Result<Option<MtuLayout>> {
    match c.meta("kind")? {
        "dense" => Ok(None),
        "mtu" => {
            let tasks = parse_task_list(c.meta("tasks")?).map_err(|e| bad(format!("stored task registry: {e}")))?;
            let top_k = match c.meta("moe.top_k")? {
                "none" => None,
                _ => Some(parse_num(c, "moe.top_k")?),
            };
            let moe = MoEConfig {
                experts: parse_num(c, "moe.experts")?,
                top_k,
                d_task: parse_num(c, "moe.d_task")?,
                iso_parameter: parse_num(c, "moe.iso_parameter")?,
            };
            moe.validate().map_err(|e| bad(format!("stored expert layout is invalid: {e}")))?;
            Ok(Some(MtuLayout { tasks, moe }))
        }
        k => Err(bad(format!("unknown model kind `{k}`"))),
    }
}

/// Expected names and shapes; dense input convs may carry `c` or `2c` input channels.
fn check_structure<F: Float>(model: &Denoiser<F>) -> Result<()> {
    let reference: ParamTree<f32> = init_dense(&model.config, 0)?;
    let expected = match &model.mtu {
        None => reference,
        Some(m) => {
            let dense = Denoiser { config: model.config.clone(), params: reference, mtu: None };
            upcycle(&dense, &m.tasks, &m.moe, 0)?.params
        }
    };
    for (name, e) in expected.iter() {
        let got = model.params.get(name).map_err(|_| bad(format!("parameter `{name}` is missing")))?;
        let (want, have) = (e.tensor.shape(), got.tensor.shape());
        let widened = model.mtu.is_none()
            && name == "input_conv.weight"
            && have.len() == 4
            && have[1] == 2 * want[1]
            && (have[0], have[2], have[3]) == (want[0], want[2], want[3]);
        if want != have && !widened {
            return Err(bad(format!("parameter `{name}` has shape {have:?}, expected {want:?}")));
        }
        if got.component != e.component {
            return Err(bad(format!("parameter `{name}` tagged {}, expected {}", got.component, e.component)));
        }
    }
    if let Some(extra) = model.params.names().find(|n| !expected.contains(n)) {
        return Err(bad(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

/// Loads a checkpoint into precision `F`, converting if it was stored in the other one.
pub fn load<F: Float>(path: &Path) -> Result<Loaded<F>> {
    let c = Container::read(path, CHECKPOINT_MAGIC)?;
    let stored_dtype = DType::parse(c.meta("dtype")?).ok_or_else(|| bad("unknown stored dtype"))?;
    let config = read_config(&c)?;
    let mtu = read_layout(&c)?;
    let mut params = ParamTree::new();
    for r in &c.records {
        let component = r.attr("component").ok_or_else(|| bad(format!("`{}` has no component tag", r.name)))?.parse()?;
        let frozen = match r.attr("frozen") {
            Some("true") => true,
            Some("false") => false,
            _ => return Err(bad(format!("`{}` has no valid frozen flag", r.name))),
        };
        let tensor = c.tensor::<F>(r)?;
        if !tensor.is_finite() {
            return Err(bad(format!("`{}` holds non-finite values", r.name)));
        }
        params.insert_entry(r.name.clone(), ParamEntry { tensor, component, frozen })?;
    }
    let model = Denoiser { config, params, mtu };
    check_structure(&model).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let meta = c
        .meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok(Loaded { model, meta, stored_dtype })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskId;

    #[test]
    fn dense_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = Denoiser::<f64>::new_dense(DenoiserConfig::tiny(), 3).unwrap();
        m.params.set_frozen(|n, _| n.starts_with("block0"));
        save(&m, &path, &[("step", "12".into())]).unwrap();
        let l = load::<f64>(&path).unwrap();
        assert_eq!(l.model, m);
        assert!(l.model.params.values_equal(&m.params));
        assert_eq!(l.meta["step"], "12");
        assert_eq!(l.stored_dtype, DType::F64);
    }

    #[test]
    fn mtu_round_trip_and_precision_change() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mtu.ckpt");
        let dense = Denoiser::<f32>::new_dense(DenoiserConfig::tiny(), 1).unwrap();
        let cfg = MoEConfig { experts: 2, top_k: Some(1), d_task: 4, iso_parameter: true };
        let m = upcycle(&dense, &[TaskId::SR, TaskId::T2I], &cfg, 2).unwrap();
        save(&m, &path, &[]).unwrap();
        let same = load::<f32>(&path).unwrap().model;
        assert_eq!(same, m);
        let wide = load::<f64>(&path).unwrap().model;
        assert_eq!(wide.mtu, m.mtu);
        assert!(wide.params.cast::<f32>().values_equal(&m.params));
    }

    #[test]
    fn corrupt_files_are_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"MTUDATA1\nversion 1\n[end]\n").unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Checkpoint(_))));

        let m = Denoiser::<f32>::new_dense(DenoiserConfig::tiny(), 0).unwrap();
        let mut broken = m.clone();
        broken.params.remove("block1.ffn.w2");
        save(&broken, &path, &[]).unwrap();
        let err = load::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("block1.ffn.w2"), "{err}");
    }
}
