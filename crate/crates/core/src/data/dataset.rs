//! Dataset files: one container per (task, split) plus a sidecar vocabulary.
//!
//! Records: `target` `[N, 3, H, W]` f32, `cond` (image tasks only), `prompt`
//! `[N, text_len]` u32, and `meta` `[N, 20]` u32 holding the sample index,
//! background, up to two objects and the edit parameters.

use std::path::{Path, PathBuf};

use super::generate::{Edit, Generator, Object, Sample, SampleMeta, Split};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::io::{Container, ContainerWriter};
use crate::task::TaskId;
use crate::tensor::Tensor;

pub const DATA_MAGIC: &str = "MTUDATA1";
const META_WIDTH: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskId,
    pub split: Split,
    pub seed: u64,
    pub image_size: usize,
    pub text_len: usize,
    pub samples: Vec<Sample>,
}

/// Sidecar vocabulary path for a dataset file.
pub fn vocab_path(path: &Path) -> PathBuf {
    path.with_extension("vocab")
}

fn encode_meta(s: &Sample) -> Result<[u32; META_WIDTH]> {
    let mut m = [0u32; META_WIDTH];
    m[0] = s.index as u32;
    m[1] = (s.index >> 32) as u32;
    m[2] = s.meta.background as u32;
    if s.meta.objects.len() > 2 {
        return Err(Error::Data("at most two objects per sample can be stored".into()));
    }
    m[3] = s.meta.objects.len() as u32;
    for (i, o) in s.meta.objects.iter().enumerate() {
        m[4 + 5 * i..9 + 5 * i].copy_from_slice(&[o.shape, o.color, o.cx, o.cy, o.r].map(|v| v as u32));
    }
    let e = &mut m[14..];
    match s.meta.edit {
        Edit::None => {}
        Edit::Recolor { new_color } => {
            e[0] = 1;
            e[1] = new_color as u32;
        }
        Edit::Remove { index, mask } => {
            if mask.iter().any(|&v| v > 0xff) {
                return Err(Error::Data(format!("mask {mask:?} does not fit the 8-bit packed layout")));
            }
            e[0] = 2;
            e[1] = index as u32;
            e[2] = (mask[0] | mask[1] << 8 | mask[2] << 16 | mask[3] << 24) as u32;
        }
        Edit::Degrade { seed } => {
            e[0] = 3;
            e[1] = seed as u32;
            e[2] = (seed >> 32) as u32;
        }
    }
    Ok(m)
}

fn decode_meta(m: &[u32]) -> Result<(u64, SampleMeta)> {
    let index = m[0] as u64 | (m[1] as u64) << 32;
    let n = m[3] as usize;
    if n > 2 {
        return Err(Error::Data(format!("sample {index}: {n} objects recorded")));
    }
    let objects = (0..n)
        .map(|i| {
            let f = &m[4 + 5 * i..9 + 5 * i];
            Object { shape: f[0] as usize, color: f[1] as usize, cx: f[2] as usize, cy: f[3] as usize, r: f[4] as usize }
        })
        .collect();
    let e = &m[14..];
    let edit = match e[0] {
        0 => Edit::None,
        1 => Edit::Recolor { new_color: e[1] as usize },
        2 => {
            let p = e[2] as usize;
            Edit::Remove { index: e[1] as usize, mask: [p & 0xff, (p >> 8) & 0xff, (p >> 16) & 0xff, p >> 24] }
        }
        3 => Edit::Degrade { seed: e[1] as u64 | (e[2] as u64) << 32 },
        k => return Err(Error::Data(format!("sample {index}: unknown edit kind {k}"))),
    };
    Ok((index, SampleMeta { background: m[2] as usize, objects, edit }))
}

fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, images.iter().flat_map(|t| t.data().iter().copied()).collect())
}

impl Dataset {
    pub fn generate(gen: &Generator, task: TaskId, split: Split, count: usize, seed: u64) -> Result<Self> {
        Ok(Dataset {
            task,
            split,
            seed,
            image_size: gen.image_size,
            text_len: gen.text_len,
            samples: gen.generate(task, split, count, seed)?,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn save(&self, path: &Path, vocab: &Vocab) -> Result<()> {
        let mut w = ContainerWriter::new(DATA_MAGIC);
        let sidecar = vocab_path(path);
        w.meta("task", self.task)
            .meta("split", self.split.as_str())
            .meta("seed", self.seed)
            .meta("count", self.len())
            .meta("image_size", self.image_size)
            .meta("text_len", self.text_len)
            .meta("vocab_file", sidecar.file_name().and_then(|n| n.to_str()).unwrap_or("vocab"));
        w.tensor("target", &stack(&self.samples.iter().map(|s| &s.target).collect::<Vec<_>>())?, Vec::new())?;
        if self.task.image_conditioned() {
            let conds = self
                .samples
                .iter()
                .map(|s| s.cond.as_ref().ok_or_else(|| Error::Data(format!("{} sample lacks a condition image", self.task))))
                .collect::<Result<Vec<_>>>()?;
            w.tensor("cond", &stack(&conds)?, Vec::new())?;
        }
        let prompts: Vec<u32> = self.samples.iter().flat_map(|s| s.prompt.iter().map(|&t| t as u32)).collect();
        w.u32s("prompt", &[self.len(), self.text_len], &prompts)?;
        let mut meta = Vec::with_capacity(self.len() * META_WIDTH);
        for s in &self.samples {
            meta.extend(encode_meta(s)?);
        }
        w.u32s("meta", &[self.len(), META_WIDTH], &meta)?;
        vocab.save(&sidecar)?;
        w.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, DATA_MAGIC).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Data(m),
            other => other,
        })?;
        let parse = |k: &str| -> Result<usize> {
            c.meta(k).map_err(|e| Error::Data(e.to_string()))?.parse().map_err(|_| Error::Data(format!("bad `{k}`")))
        };
        let task: TaskId = c.meta("task").map_err(|e| Error::Data(e.to_string()))?.parse()?;
        let split = Split::parse(c.meta("split").map_err(|e| Error::Data(e.to_string()))?)?;
        let (count, image_size, text_len) = (parse("count")?, parse("image_size")?, parse("text_len")?);
        let seed = parse("seed")? as u64;
        let rec = |n: &str| c.record(n).map_err(|e| Error::Data(e.to_string()));
        let target: Tensor<f32> = c.tensor(rec("target")?)?;
        let cond: Option<Tensor<f32>> = if task.image_conditioned() { Some(c.tensor(rec("cond")?)?) } else { None };
        let prompts = c.u32s(rec("prompt")?)?;
        let meta = c.u32s(rec("meta")?)?;
        let per = 3 * image_size * image_size;
        if target.numel() != count * per || prompts.len() != count * text_len || meta.len() != count * META_WIDTH {
            return Err(Error::Data(format!("{}: record sizes disagree with count {count}", path.display())));
        }
        let vocab = Vocab::load(&vocab_path(path))?;
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let img = |t: &Tensor<f32>| Tensor::new(vec![3, image_size, image_size], t.data()[i * per..(i + 1) * per].to_vec());
            let (index, m) = decode_meta(&meta[i * META_WIDTH..(i + 1) * META_WIDTH])?;
            let prompt: Vec<usize> = prompts[i * text_len..(i + 1) * text_len].iter().map(|&t| t as usize).collect();
            if let Some(&bad) = prompt.iter().find(|&&t| t >= vocab.len()) {
                return Err(Error::Data(format!("sample {index}: token {bad} outside the sidecar vocabulary")));
            }
            samples.push(Sample {
                task,
                index,
                target: img(&target)?,
                cond: cond.as_ref().map(img).transpose()?,
                prompt,
                meta: m,
            });
        }
        Ok(Dataset { task, split, seed, image_size, text_len, samples })
    }
}
