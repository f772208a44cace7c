//! Desk-scale evaluation metrics: directional similarities in a small
//! feature space, MSE and PSNR, plus the evaluation harness over a split.

use crate::data::generate::{Sample, BACKGROUND_RGB, COLOR_RGB, MASK_RGB};
use crate::data::vocab::{Vocab, BACKGROUNDS, COLORS};
use crate::diffusion::stack_images;
use crate::error::{Error, Result};
use crate::model::{Denoiser, Routing};
use crate::report::{fmt_f64, Table};
use crate::sampler::{sample, SampleRequest, SamplerOptions};
use crate::schedule::NoiseSchedule;
use crate::task::TaskId;
use crate::tensor::{Float, Tensor};
use crate::upcycle::TaskWeightCache;

/// First line of every metric report.
pub const METRIC_NOTE: &str = "metrics are desk-scale surrogates: MSE/PSNR instead of LPIPS/FID, \
pixel and palette features instead of CLIP embeddings";

/// A cosine similarity; `degenerate` marks a zero difference vector, for
/// which the value is defined as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<Similarity> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("feature widths {} and {}", a.len(), b.len())));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Ok(Similarity { value: 0.0, degenerate: true });
    }
    Ok(Similarity { value: (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0), degenerate: false })
}

fn diff(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("feature widths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// `S(T_ed - T_in, I_ed - I_in)`.
pub fn it_directional_similarity(t_in: &[f64], t_ed: &[f64], i_in: &[f64], i_ed: &[f64]) -> Result<Similarity> {
    cosine(&diff(t_ed, t_in)?, &diff(i_ed, i_in)?)
}

/// `S(I_gt - I_in, I_ed - I_in)`.
pub fn ii_directional_similarity(i_gt: &[f64], i_in: &[f64], i_ed: &[f64]) -> Result<Similarity> {
    cosine(&diff(i_gt, i_in)?, &diff(i_ed, i_in)?)
}

/// Mean squared error and PSNR for images in `[-1, 1]` (peak-to-peak 2).
/// Identical images give `psnr = +inf`.
pub fn psnr_mse<F: Float>(pred: &[F], target: &[F]) -> Result<(f64, f64)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predicted vs {} target values", pred.len(), target.len())));
    }
    let mse = pred.iter().zip(target).map(|(&p, &t)| (p.as_f64() - t.as_f64()).powi(2)).sum::<f64>() / pred.len() as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / mse).log10() };
    Ok((mse, psnr))
}

/// Image to feature vector.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, img: &[f32]) -> Result<Vec<f64>>;
}

/// Flattened pixels minus their mean.
#[derive(Clone, Copy, Debug)]
pub struct PixelFeatures {
    pub len: usize,
}

impl FeatureExtractor for PixelFeatures {
    fn dim(&self) -> usize {
        self.len
    }

    fn extract(&self, img: &[f32]) -> Result<Vec<f64>> {
        if img.len() != self.len {
            return Err(Error::Shape(format!("pixel extractor expects {} values, got {}", self.len, img.len())));
        }
        let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
        Ok(img.iter().map(|&v| v as f64 - mean).collect())
    }
}

/// Palette entries: object colors, backgrounds, then the mask fill.
fn palette() -> Vec<[f32; 3]> {
    COLOR_RGB.iter().chain(BACKGROUND_RGB.iter()).copied().chain(std::iter::once(MASK_RGB)).collect()
}

/// Fraction of pixels nearest to each palette color. Shares its axes with
/// [`PaletteFeatures::text`], so image and prompt differences are comparable.
#[derive(Clone, Copy, Debug)]
pub struct PaletteFeatures {
    pub image_size: usize,
}

impl PaletteFeatures {
    pub const DIM: usize = COLORS.len() + BACKGROUNDS.len() + 1;

    /// Counts of color and background words in a prompt.
    pub fn text(&self, prompt: &[usize], vocab: &Vocab) -> Vec<f64> {
        let mut f = vec![0.0; Self::DIM];
        for tok in prompt.iter().filter_map(|&id| vocab.token(id)) {
            if let Some(i) = COLORS.iter().position(|&c| c == tok) {
                f[i] += 1.0;
            } else if let Some(i) = BACKGROUNDS.iter().position(|&b| b == tok) {
                f[COLORS.len() + i] += 1.0;
            }
        }
        f
    }
}

impl FeatureExtractor for PaletteFeatures {
    fn dim(&self) -> usize {
        Self::DIM
    }

    fn extract(&self, img: &[f32]) -> Result<Vec<f64>> {
        let hw = self.image_size * self.image_size;
        if img.len() != 3 * hw {
            return Err(Error::Shape(format!("palette extractor expects {} values, got {}", 3 * hw, img.len())));
        }
        let pal = palette();
        let mut f = vec![0.0; Self::DIM];
        for p in 0..hw {
            let px = [img[p], img[hw + p], img[2 * hw + p]];
            let mut best = (f32::INFINITY, 0);
            for (i, c) in pal.iter().enumerate() {
                let d: f32 = (0..3).map(|k| (px[k] - c[k]).powi(2)).sum();
                if d < best.0 {
                    best = (d, i);
                }
            }
            f[best.1] += 1.0 / hw as f64;
        }
        Ok(f)
    }
}

/// Per-sample evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub index: u64,
    pub mse: f64,
    pub psnr: f64,
    /// Image-image similarity to the ground truth (image tasks only).
    pub ii: Option<Similarity>,
    /// Image-text similarity (edit tasks only).
    pub it: Option<Similarity>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: TaskId,
    pub scores: Vec<SampleScore>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn mean_mse(&self) -> f64 {
        mean(self.scores.iter().map(|s| s.mse))
    }

    /// PSNR of the mean MSE, so identical images do not make it infinite.
    pub fn psnr_of_mean_mse(&self) -> f64 {
        let m = self.mean_mse();
        if m == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (4.0 / m).log10()
        }
    }

    pub fn mean_ii(&self) -> Option<f64> {
        self.scores.iter().all(|s| s.ii.is_some()).then(|| mean(self.scores.iter().filter_map(|s| s.ii.map(|x| x.value))))
    }

    pub fn mean_it(&self) -> Option<f64> {
        self.scores.iter().all(|s| s.it.is_some()).then(|| mean(self.scores.iter().filter_map(|s| s.it.map(|x| x.value))))
    }

    pub fn degenerate_count(&self) -> usize {
        self.scores
            .iter()
            .filter(|s| s.ii.is_some_and(|x| x.degenerate) || s.it.is_some_and(|x| x.degenerate))
            .count()
    }

    /// Per-sample rows followed by a `mean` row.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["task", "index", "mse", "psnr", "ii_similarity", "it_similarity", "degenerate"])
            .comment(METRIC_NOTE);
        let opt = |s: Option<Similarity>| s.map_or(String::new(), |x| fmt_f64(x.value));
        for s in &self.scores {
            let deg = s.ii.is_some_and(|x| x.degenerate) || s.it.is_some_and(|x| x.degenerate);
            t.push([
                self.task.to_string(),
                s.index.to_string(),
                fmt_f64(s.mse),
                fmt_f64(s.psnr),
                opt(s.ii),
                opt(s.it),
                deg.to_string(),
            ]);
        }
        t.push([
            self.task.to_string(),
            "mean".into(),
            fmt_f64(self.mean_mse()),
            fmt_f64(self.psnr_of_mean_mse()),
            self.mean_ii().map_or(String::new(), fmt_f64),
            self.mean_it().map_or(String::new(), fmt_f64),
            self.degenerate_count().to_string(),
        ]);
        t
    }
}

/// Caption of the scene before an edit, for image-text similarity.
fn source_caption(s: &Sample, vocab: &Vocab) -> Result<Option<Vec<usize>>> {
    use crate::data::generate::Edit;
    let words = |meta: &crate::data::generate::SampleMeta| -> Vec<&str> {
        let mut w: Vec<&str> = meta.objects.iter().map(|o| COLORS[o.color]).collect();
        w.push(BACKGROUNDS[meta.background]);
        w
    };
    let mut before = s.meta.clone();
    let after = match s.meta.edit {
        Edit::Recolor { new_color } => {
            let mut a = s.meta.clone();
            a.objects[0].color = new_color;
            a
        }
        Edit::Remove { index, .. } => {
            let mut a = s.meta.clone();
            a.objects.remove(index);
            a
        }
        _ => return Ok(None),
    };
    before.edit = crate::data::generate::Edit::None;
    let enc = |w: Vec<&str>| vocab.encode(&w.join(" "), w.len());
    Ok(Some([enc(words(&before))?, enc(words(&after))?].concat()))
}

/// Samples every example of `samples` (chunked) and scores it against its target.
pub fn evaluate<F: Float>(
    model: &Denoiser<F>,
    task: TaskId,
    samples: &[Sample],
    opts: &SamplerOptions,
    vocab: &Vocab,
    seed: u64,
    chunk: usize,
) -> Result<EvalReport> {
    if chunk == 0 {
        return Err(Error::Config("evaluation chunk size must be positive".into()));
    }
    let schedule = NoiseSchedule::linear(model.config.timesteps)?;
    let cache = if model.is_mtu() { Some(TaskWeightCache::build(model)?) } else { None };
    let routing = cache.as_ref().map_or(Routing::OnTheFly, Routing::Cached);
    let pixels = PixelFeatures { len: 3 * model.config.image_size * model.config.image_size };
    let palette = PaletteFeatures { image_size: model.config.image_size };
    let mut scores = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk) {
        if let Some(s) = part.iter().find(|s| s.task != task) {
            return Err(Error::Data(format!("{} sample in a {task} evaluation", s.task)));
        }
        let text: Vec<usize> = part.iter().flat_map(|s| s.prompt.iter().copied()).collect();
        let cond: Option<Tensor<F>> = if task.image_conditioned() {
            let imgs = part
                .iter()
                .map(|s| s.cond.as_ref().ok_or_else(|| Error::Data(format!("{task} sample {} lacks a condition", s.index))))
                .collect::<Result<Vec<_>>>()?;
            Some(stack_images(&imgs))
        } else {
            None
        };
        let seeds: Vec<u64> = part.iter().map(|s| seed ^ s.index.wrapping_mul(0x9e37_79b9_7f4a_7c15)).collect();
        let req = SampleRequest { task, text: &text, cond: cond.as_ref(), seeds: &seeds };
        let out = sample(model, &schedule, &req, opts, routing)?;
        let per = out.numel() / part.len();
        for (b, s) in part.iter().enumerate() {
            let img: Vec<f32> = out.data()[b * per..(b + 1) * per].iter().map(|v| v.as_f64() as f32).collect();
            let (mse, psnr) = psnr_mse(&img, s.target.data())?;
            let (mut ii, mut it) = (None, None);
            if let Some(c) = &s.cond {
                let f_in = pixels.extract(c.data())?;
                ii = Some(ii_directional_similarity(&pixels.extract(s.target.data())?, &f_in, &pixels.extract(&img)?)?);
                if let Some(caps) = source_caption(s, vocab)? {
                    let n = s.meta.objects.len() + 1;
                    let (t_in, t_ed) = caps.split_at(n);
                    it = Some(it_directional_similarity(
                        &palette.text(t_in, vocab),
                        &palette.text(t_ed, vocab),
                        &palette.extract(c.data())?,
                        &palette.extract(&img)?,
                    )?);
                }
            }
            scores.push(SampleScore { index: s.index, mse, psnr, ii, it });
        }
    }
    Ok(EvalReport { task, scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructed_directions() {
        let a = [1.0, 2.0, 0.0];
        let zero = [0.0; 3];
        let par = it_directional_similarity(&zero, &a, &zero, &[2.0, 4.0, 0.0]).unwrap();
        assert!((par.value - 1.0).abs() < 1e-12);
        let anti = it_directional_similarity(&zero, &a, &zero, &[-0.5, -1.0, 0.0]).unwrap();
        assert!((anti.value + 1.0).abs() < 1e-12);
        let orth = it_directional_similarity(&zero, &a, &zero, &[-2.0, 1.0, 5.0]).unwrap();
        assert!(orth.value.abs() < 1e-6);
        let gt = [0.3, -0.2, 0.9];
        assert!((ii_directional_similarity(&gt, &a, &gt).unwrap().value - 1.0).abs() < 1e-12);
        let same = ii_directional_similarity(&gt, &a, &a).unwrap();
        assert_eq!(same, Similarity { value: 0.0, degenerate: true });
    }

    #[test]
    fn psnr_closed_forms() {
        let t: Vec<f64> = (0..12).map(|i| i as f64 / 8.0 - 0.75).collect();
        let (m, p) = psnr_mse(&t, &t).unwrap();
        assert_eq!((m, p), (0.0, f64::INFINITY));
        let shifted: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        let (m, p) = psnr_mse(&shifted, &t).unwrap();
        assert!((m - 0.01).abs() < 1e-15, "{m}");
        assert!((p - 10.0 * 400f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn palette_counts_pixels() {
        let img = crate::data::generate::render(8, 1, &[]);
        let f = PaletteFeatures { image_size: 8 }.extract(img.data()).unwrap();
        assert_eq!(f[COLORS.len() + 1], 1.0);
        assert_eq!(f.iter().sum::<f64>(), 1.0);
        let v = Vocab::builtin();
        let p = v.encode("make the circle red", 6).unwrap();
        let tf = PaletteFeatures { image_size: 8 }.text(&p, &v);
        assert_eq!(tf[0], 1.0);
    }
}
