//! Procedural scenes of flat-colored shapes and the four task generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::vocab::{Vocab, BACKGROUNDS, COLORS, SHAPES};
use crate::error::{Error, Result};
use crate::task::TaskId;
use crate::tensor::Tensor;

/// RGB in [-1, 1] for each entry of [`COLORS`].
pub const COLOR_RGB: [[f32; 3]; 6] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
];
/// RGB for each entry of [`BACKGROUNDS`].
pub const BACKGROUND_RGB: [[f32; 3]; 3] = [[-1.0, -1.0, -1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
/// Fill used to blank out the object to be removed.
pub const MASK_RGB: [f32; 3] = [0.5, 0.5, 0.5];

const BLUR_SIGMA: f64 = 0.8;
const SR_NOISE_STD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// Global index of the first sample; ranges never overlap for counts below 2^32.
    pub fn offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 32,
            Split::Test => 2 << 32,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown split `{s}` (train, val, test)")))
    }

    /// Default number of samples per task.
    pub fn default_count(self) -> usize {
        match self {
            Split::Train => 2048,
            Split::Val | Split::Test => 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub shape: usize,
    pub color: usize,
    pub cx: usize,
    pub cy: usize,
    pub r: usize,
}

impl Object {
    /// Inclusive bounding box `[x0, y0, x1, y1]`.
    pub fn bbox(&self) -> [usize; 4] {
        [self.cx - self.r, self.cy - self.r, self.cx + self.r, self.cy + self.r]
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as i64 - self.cx as i64, y as i64 - self.cy as i64);
        let r = self.r as i64;
        if dx.abs() > r || dy.abs() > r {
            return false;
        }
        match self.shape {
            0 => dx * dx + dy * dy <= r * r,
            1 => true,
            // apex at the top, base on the bottom edge of the box
            _ => 2 * dx.abs() <= dy + r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edit {
    None,
    Recolor { new_color: usize },
    Remove { index: usize, mask: [usize; 4] },
    Degrade { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub background: usize,
    pub objects: Vec<Object>,
    pub edit: Edit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub task: TaskId,
    pub index: u64,
    /// `[c, H, W]` in [-1, 1].
    pub target: Tensor<f32>,
    pub cond: Option<Tensor<f32>>,
    pub prompt: Vec<usize>,
    pub meta: SampleMeta,
}

/// Draws the scene `objects` on `background`.
pub fn render(size: usize, background: usize, objects: &[Object]) -> Tensor<f32> {
    let mut img = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let mut rgb = BACKGROUND_RGB[background];
            for o in objects {
                if o.contains(x, y) {
                    rgb = COLOR_RGB[o.color];
                }
            }
            for ch in 0..3 {
                img[(ch * size + y) * size + x] = rgb[ch];
            }
        }
    }
    Tensor::new(vec![3, size, size], img).expect("sized above")
}

/// Replaces every pixel of color `from` with color `to`.
pub fn recolor(img: &Tensor<f32>, from: usize, to: usize) -> Tensor<f32> {
    let hw = img.shape()[1] * img.shape()[2];
    let mut out = img.clone();
    let d = out.data_mut();
    for p in 0..hw {
        if (0..3).all(|ch| d[ch * hw + p] == COLOR_RGB[from][ch]) {
            for ch in 0..3 {
                d[ch * hw + p] = COLOR_RGB[to][ch];
            }
        }
    }
    out
}

/// Fills an inclusive box with `rgb`.
pub fn fill_box(img: &Tensor<f32>, b: [usize; 4], rgb: [f32; 3]) -> Tensor<f32> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = img.clone();
    let d = out.data_mut();
    for y in b[1]..=b[3].min(h - 1) {
        for x in b[0]..=b[2].min(w - 1) {
            for ch in 0..3 {
                d[(ch * h + y) * w + x] = rgb[ch];
            }
        }
    }
    out
}

/// Blur, 2x average-pool downscale, additive noise, clamp, nearest upscale.
pub fn degrade(img: &Tensor<f32>, seed: u64) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let k: Vec<f64> = (-1..=1).map(|i: i32| (-(i * i) as f64 / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp()).collect();
    let ksum: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / ksum).collect();
    let at = |ch: usize, y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        img.data()[(ch * h + y) * w + x] as f64
    };
    let mut blurred = vec![0f64; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (dy, ky) in k.iter().enumerate() {
                    for (dx, kx) in k.iter().enumerate() {
                        s += ky * kx * at(ch, y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                    }
                }
                blurred[(ch * h + y) * w + x] = s;
            }
        }
    }
    let (lh, lw) = (h / 2, w / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut low = vec![0f64; c * lh * lw];
    for ch in 0..c {
        for y in 0..lh {
            for x in 0..lw {
                let b = |yy: usize, xx: usize| blurred[(ch * h + yy) * w + xx];
                let avg = (b(2 * y, 2 * x) + b(2 * y, 2 * x + 1) + b(2 * y + 1, 2 * x) + b(2 * y + 1, 2 * x + 1)) / 4.0;
                let n: f64 = rng.sample(StandardNormal);
                low[(ch * lh + y) * lw + x] = (avg + SR_NOISE_STD * n).clamp(-1.0, 1.0);
            }
        }
    }
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = low[(ch * lh + y / 2) * lw + x / 2] as f32;
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("sized above")
}

/// Seed for sample `index` of `task`: a SplitMix64 finalizer over the inputs.
fn sample_seed(seed: u64, task: TaskId, index: u64) -> u64 {
    let mut z = seed ^ (task.index() as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator for all four tasks.
#[derive(Clone, Debug)]
pub struct Generator {
    pub image_size: usize,
    pub text_len: usize,
    pub vocab: Vocab,
}

impl Generator {
    pub fn new(image_size: usize, text_len: usize) -> Result<Self> {
        if image_size < 6 || !image_size.is_multiple_of(2) {
            return Err(Error::Data(format!("image size {image_size} must be even and at least 6")));
        }
        if text_len < 5 {
            return Err(Error::Data(format!("text_len {text_len} too short for captions (need 5)")));
        }
        Ok(Generator { image_size, text_len, vocab: Vocab::builtin() })
    }

    fn random_object(&self, rng: &mut ChaCha8Rng, avoid: Option<&Object>) -> Object {
        let s = self.image_size;
        let (rmin, rmax) = ((s / 6).max(1), (s / 4).max(1));
        for attempt in 0..200 {
            let r = if attempt < 100 { rng.random_range(rmin..=rmax) } else { 1 };
            let cx = rng.random_range(r..s - r);
            let cy = rng.random_range(r..s - r);
            let o = Object { shape: rng.random_range(0..SHAPES.len()), color: rng.random_range(0..COLORS.len()), cx, cy, r };
            let Some(a) = avoid else { return o };
            let (p, q) = (o.bbox(), a.bbox());
            let disjoint = p[2] < q[0] || q[2] < p[0] || p[3] < q[1] || q[3] < p[1];
            if disjoint && o.shape != a.shape {
                return o;
            }
        }
        // Fall back to opposite corners.
        let shape = (avoid.map_or(0, |a| a.shape) + 1) % SHAPES.len();
        let (cx, cy) = match avoid {
            Some(a) if a.cx < s / 2 => (s - 2, s - 2),
            _ => (1, 1),
        };
        Object { shape, color: rng.random_range(0..COLORS.len()), cx, cy, r: 1 }
    }

    fn encode(&self, text: &str) -> Result<Vec<usize>> {
        self.vocab.encode(text, self.text_len)
    }

    /// Caption describing a scene, e.g. `a red circle on gray`.
    pub fn caption(&self, meta: &SampleMeta) -> Result<Vec<usize>> {
        let objs: Vec<String> =
            meta.objects.iter().map(|o| format!("{} {}", COLORS[o.color], SHAPES[o.shape])).collect();
        let text = if objs.len() == 1 {
            format!("a {} on {}", objs[0], BACKGROUNDS[meta.background])
        } else {
            objs.join(" and ")
        };
        self.encode(&text)
    }

    pub fn generate_one(&self, task: TaskId, seed: u64, index: u64) -> Result<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, task, index));
        let s = self.image_size;
        let background = rng.random_range(0..BACKGROUNDS.len());
        let first = self.random_object(&mut rng, None);
        let sample = match task {
            TaskId::T2I => {
                let meta = SampleMeta { background, objects: vec![first], edit: Edit::None };
                Sample {
                    task,
                    index,
                    target: render(s, background, &meta.objects),
                    cond: None,
                    prompt: self.caption(&meta)?,
                    meta,
                }
            }
            TaskId::IE => {
                let new_color = (first.color + rng.random_range(1..COLORS.len())) % COLORS.len();
                let input = render(s, background, &[first]);
                let target = recolor(&input, first.color, new_color);
                let prompt = self.encode(&format!("make the {} {}", SHAPES[first.shape], COLORS[new_color]))?;
                let meta = SampleMeta { background, objects: vec![first], edit: Edit::Recolor { new_color } };
                Sample { task, index, target, cond: Some(input), prompt, meta }
            }
            TaskId::SR => {
                let mut objects = vec![first];
                if rng.random_bool(0.5) {
                    objects.push(self.random_object(&mut rng, Some(&first)));
                }
                let target = render(s, background, &objects);
                let dseed: u64 = rng.random();
                let cond = degrade(&target, dseed);
                let meta = SampleMeta { background, objects, edit: Edit::Degrade { seed: dseed } };
                Sample { task, index, target, cond: Some(cond), prompt: self.vocab.null_prompt(self.text_len), meta }
            }
            TaskId::IP => {
                let second = self.random_object(&mut rng, Some(&first));
                let objects = vec![first, second];
                let index_removed = rng.random_range(0..2);
                let removed = objects[index_removed];
                let mask = removed.bbox();
                let scene = render(s, background, &objects);
                let cond = fill_box(&scene, mask, MASK_RGB);
                let target = fill_box(&scene, mask, BACKGROUND_RGB[background]);
                let prompt = self.encode(&format!("remove the {}", SHAPES[removed.shape]))?;
                let meta = SampleMeta { background, objects, edit: Edit::Remove { index: index_removed, mask } };
                Sample { task, index, target, cond: Some(cond), prompt, meta }
            }
        };
        Ok(sample)
    }

    /// `count` samples of `split`, starting at the split's index offset.
    pub fn generate(&self, task: TaskId, split: Split, count: usize, seed: u64) -> Result<Vec<Sample>> {
        if count == 0 {
            return Err(Error::Data("sample count must be at least 1".into()));
        }
        (0..count as u64).map(|i| self.generate_one(task, seed, split.offset() + i)).collect()
    }
}

/// Replays the generator's own edit on the condition image; must equal the target.
pub fn replay_edit(sample: &Sample) -> Option<Tensor<f32>> {
    let cond = sample.cond.as_ref()?;
    match sample.meta.edit {
        Edit::Recolor { new_color } => Some(recolor(cond, sample.meta.objects[0].color, new_color)),
        Edit::Remove { mask, .. } => Some(fill_box(cond, mask, BACKGROUND_RGB[sample.meta.background])),
        Edit::Degrade { .. } | Edit::None => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::bitwise_eq;

    fn generator() -> Generator {
        Generator::new(24, 8).unwrap()
    }

    #[test]
    fn same_inputs_same_sample() {
        let g = generator();
        for task in TaskId::ALL {
            let a = g.generate_one(task, 5, 17).unwrap();
            let b = g.generate_one(task, 5, 17).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, g.generate_one(task, 5, 18).unwrap());
        }
    }

    #[test]
    fn pixel_range_and_shapes() {
        let g = generator();
        for task in TaskId::ALL {
            for s in g.generate(task, Split::Val, 20, 1).unwrap() {
                assert_eq!(s.target.shape(), [3, 24, 24]);
                assert!(s.target.data().iter().all(|v| (-1.0..=1.0).contains(v)));
                assert_eq!(s.cond.is_some(), task.image_conditioned());
                if let Some(c) = &s.cond {
                    assert!(c.data().iter().all(|v| (-1.0..=1.0).contains(v)));
                }
                assert_eq!(s.prompt.len(), 8);
            }
        }
    }

    #[test]
    fn edits_replay_exactly() {
        let g = generator();
        for task in [TaskId::IE, TaskId::IP] {
            for s in g.generate(task, Split::Train, 50, 3).unwrap() {
                let replay = replay_edit(&s).unwrap();
                assert!(bitwise_eq(replay.data(), s.target.data()), "{task} #{}", s.index);
            }
        }
    }

    #[test]
    fn sr_pipeline_replays() {
        let g = generator();
        for s in g.generate(TaskId::SR, Split::Test, 30, 4).unwrap() {
            let Edit::Degrade { seed } = s.meta.edit else { panic!("SR sample without degradation seed") };
            assert!(bitwise_eq(degrade(&s.target, seed).data(), s.cond.as_ref().unwrap().data()));
            assert_eq!(s.prompt, g.vocab.null_prompt(8));
        }
    }

    #[test]
    fn edits_stay_inside_their_region() {
        let g = generator();
        for s in g.generate(TaskId::IP, Split::Train, 50, 9).unwrap() {
            let Edit::Remove { mask, .. } = s.meta.edit else { unreachable!() };
            let cond = s.cond.as_ref().unwrap();
            let mut changed = 0;
            for ch in 0..3 {
                for y in 0..24 {
                    for x in 0..24 {
                        let i = (ch * 24 + y) * 24 + x;
                        let inside = (mask[0]..=mask[2]).contains(&x) && (mask[1]..=mask[3]).contains(&y);
                        if cond.data()[i] != s.target.data()[i] {
                            assert!(inside);
                            changed += 1;
                        }
                    }
                }
            }
            assert!(changed > 0);
        }
        for s in g.generate(TaskId::IE, Split::Train, 50, 9).unwrap() {
            let o = s.meta.objects[0];
            let cond = s.cond.as_ref().unwrap();
            for y in 0..24 {
                for x in 0..24 {
                    let same = (0..3).all(|ch| cond.data()[(ch * 24 + y) * 24 + x] == s.target.data()[(ch * 24 + y) * 24 + x]);
                    assert_eq!(same, !o.contains(x, y));
                }
            }
        }
    }

    #[test]
    fn split_offsets_are_disjoint() {
        let counts = Split::ALL.map(Split::default_count);
        for (i, a) in Split::ALL.iter().enumerate() {
            for (j, b) in Split::ALL.iter().enumerate().skip(i + 1) {
                let ra = a.offset()..a.offset() + counts[i] as u64;
                let rb = b.offset()..b.offset() + counts[j] as u64;
                assert!(ra.end <= rb.start || rb.end <= ra.start);
            }
        }
    }
}
