//! Synthetic clips, clip and dataset files, frame sampling and crops.
//!
//! Clip file layout (little-endian): magic `GSFV`, then `u32` T, C, H, W,
//! then `T·C·H·W` bytes of pixels in T×C×H×W order. A dataset is a text
//! file with one `path<TAB>label` line per clip; relative paths are
//! resolved against the dataset file's directory.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;

use crate::error::{config_err, GsfError, Result};
use crate::rng::{seeded, standard_normal, GsfRng};
use crate::tensor::{Element, Tensor};

pub const CLIP_MAGIC: &[u8; 4] = b"GSFV";
pub const BACKGROUND: u8 = 32;
pub const FOREGROUND: u8 = 224;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// A bar sweeping up, down, left or right (labels 0..4 in that order).
    Direction4,
    /// A square that appears (label 0) or vanishes (label 1) part-way
    /// through the clip.
    Order2,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Direction4 => 4,
            Task::Order2 => 2,
        }
    }

    /// Label of a horizontally mirrored clip.
    pub fn flip_label(self, label: usize) -> usize {
        match (self, label) {
            (Task::Direction4, 2) => 3,
            (Task::Direction4, 3) => 2,
            _ => label,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Direction4 => "direction4",
            Task::Order2 => "order2",
        })
    }
}

impl FromStr for Task {
    type Err = GsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direction4" => Ok(Task::Direction4),
            "order2" => Ok(Task::Order2),
            other => config_err(format!("unknown task `{other}` (direction4, order2)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub task: Task,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Standard deviation of additive pixel noise, in grey levels.
    pub noise: f64,
    pub seed: u64,
    /// Bar thickness for direction4.
    pub bar: usize,
    /// Bar displacement per frame for direction4.
    pub speed: usize,
    /// Start direction4 bars at a random offset instead of 0.
    pub phase_jitter: bool,
    /// Square side for order2.
    pub pattern: usize,
}

impl SyntheticSpec {
    pub fn new(task: Task, t: usize, h: usize, w: usize, seed: u64) -> Self {
        SyntheticSpec {
            task,
            t,
            h,
            w,
            noise: 10.0,
            seed,
            bar: 3,
            speed: 2,
            phase_jitter: true,
            pattern: (h.min(w) / 3).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 {
            return config_err("clip dimensions must be positive");
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return config_err("noise must be finite and non-negative");
        }
        match self.task {
            Task::Direction4 => {
                if self.bar == 0 || self.bar >= self.h.min(self.w) {
                    return config_err(format!(
                        "bar of thickness {} does not fit a {}×{} frame",
                        self.bar, self.h, self.w
                    ));
                }
            }
            Task::Order2 => {
                if self.t < 2 {
                    return config_err("order2 needs at least two frames");
                }
                if self.pattern == 0 || self.pattern > self.h.min(self.w) {
                    return config_err(format!(
                        "pattern of side {} does not fit a {}×{} frame",
                        self.pattern, self.h, self.w
                    ));
                }
            }
        }
        Ok(())
    }

    /// Expected fraction of foreground pixels over a balanced dataset.
    pub fn coverage(&self) -> f64 {
        match self.task {
            Task::Direction4 => {
                let vertical = self.bar as f64 / self.w as f64;
                let horizontal = self.bar as f64 / self.h as f64;
                0.5 * (vertical + horizontal)
            }
            Task::Order2 => 0.5 * (self.pattern * self.pattern) as f64 / (self.h * self.w) as f64,
        }
    }

    /// Expected mean pixel value with no noise.
    pub fn expected_mean(&self) -> f64 {
        BACKGROUND as f64 + (FOREGROUND as f64 - BACKGROUND as f64) * self.coverage()
    }
}

/// A labelled clip of `t×c×h×w` pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clip {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
    pub label: usize,
}

impl Clip {
    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.c * self.h * self.w;
        &self.pixels[t * n..(t + 1) * n]
    }

    /// The same clip played backwards.
    pub fn reversed(&self, label: usize) -> Clip {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for t in (0..self.t).rev() {
            pixels.extend_from_slice(self.frame(t));
        }
        Clip {
            pixels,
            label,
            ..self.clone()
        }
    }

    /// The clip with frames in the given order.
    pub fn reordered(&self, order: &[usize]) -> Clip {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for &t in order {
            pixels.extend_from_slice(self.frame(t));
        }
        Clip {
            pixels,
            t: order.len(),
            ..self.clone()
        }
    }
}

fn noisy(value: u8, noise: f64, rng: &mut GsfRng) -> u8 {
    if noise == 0.0 {
        return value;
    }
    (value as f64 + noise * standard_normal(rng)).round().clamp(0.0, 255.0) as u8
}

fn direction_clip(spec: &SyntheticSpec, label: usize, rng: &mut GsfRng) -> Clip {
    let (t, h, w) = (spec.t, spec.h, spec.w);
    let vertical_bar = label >= 2;
    let extent = if vertical_bar { w } else { h };
    let phase = if spec.phase_jitter { rng.gen_range(0..extent) } else { 0 };
    let mut pixels = vec![BACKGROUND; t * h * w];
    for f in 0..t {
        let travel = (f * spec.speed) % extent;
        let pos = match label {
            0 | 2 => (phase + extent - travel) % extent,
            _ => (phase + travel) % extent,
        };
        for k in 0..spec.bar {
            let line = (pos + k) % extent;
            if vertical_bar {
                for y in 0..h {
                    pixels[(f * h + y) * w + line] = FOREGROUND;
                }
            } else {
                for x in 0..w {
                    pixels[(f * h + line) * w + x] = FOREGROUND;
                }
            }
        }
    }
    for p in &mut pixels {
        *p = noisy(*p, spec.noise, rng);
    }
    Clip {
        t,
        c: 1,
        h,
        w,
        pixels,
        label,
    }
}

fn order_clip(spec: &SyntheticSpec, rng: &mut GsfRng) -> Clip {
    let (t, h, w, s) = (spec.t, spec.h, spec.w, spec.pattern);
    let onset = rng.gen_range(1..t);
    let top = rng.gen_range(0..=h - s);
    let left = rng.gen_range(0..=w - s);
    let mut pixels = vec![BACKGROUND; t * h * w];
    for f in onset..t {
        for y in top..top + s {
            for x in left..left + s {
                pixels[(f * h + y) * w + x] = FOREGROUND;
            }
        }
    }
    for p in &mut pixels {
        *p = noisy(*p, spec.noise, rng);
    }
    Clip {
        t,
        c: 1,
        h,
        w,
        pixels,
        label: 0,
    }
}

/// Generates `n` clips, deterministically in `spec.seed`.
///
/// direction4 cycles through the four labels. order2 emits pairs: an
/// appearing clip followed by its exact frame reversal, labelled 1.
pub fn generate(spec: &SyntheticSpec, n: usize) -> Result<Vec<Clip>> {
    spec.validate()?;
    let classes = spec.task.num_classes();
    if n < classes {
        return config_err(format!("need at least {classes} clips, asked for {n}"));
    }
    let mut clips = Vec::with_capacity(n);
    match spec.task {
        Task::Direction4 => {
            for i in 0..n {
                let mut rng = seeded(clip_seed(spec.seed, i));
                clips.push(direction_clip(spec, i % 4, &mut rng));
            }
        }
        Task::Order2 => {
            for pair in 0..n.div_ceil(2) {
                let mut rng = seeded(clip_seed(spec.seed, pair));
                let clip = order_clip(spec, &mut rng);
                let rev = clip.reversed(1);
                clips.push(clip);
                if clips.len() < n {
                    clips.push(rev);
                }
            }
        }
    }
    Ok(clips)
}

fn clip_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

pub fn write_clip(writer: &mut impl Write, clip: &Clip) -> Result<()> {
    writer.write_all(CLIP_MAGIC)?;
    for d in [clip.t, clip.c, clip.h, clip.w] {
        let d = u32::try_from(d).map_err(|_| GsfError::Data(format!("dimension {d} exceeds u32")))?;
        writer.write_all(&d.to_le_bytes())?;
    }
    writer.write_all(&clip.pixels)?;
    Ok(())
}

/// Reads a clip body; the label is not stored in the file and is set to 0.
pub fn read_clip(reader: &mut impl Read) -> Result<Clip> {
    let mut header = [0u8; 20];
    reader.read_exact(&mut header).map_err(truncated)?;
    if &header[..4] != CLIP_MAGIC {
        return Err(GsfError::Data("clip file does not start with GSFV".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, c, h, w) = (dim(0), dim(1), dim(2), dim(3));
    if t == 0 || c == 0 || h == 0 || w == 0 {
        return Err(GsfError::Data(format!("clip has empty dimension {t}×{c}×{h}×{w}")));
    }
    let len = t
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .filter(|&v| v <= 1 << 30)
        .ok_or_else(|| GsfError::Data("clip dimensions too large".into()))?;
    let mut pixels = vec![0u8; len];
    reader.read_exact(&mut pixels).map_err(truncated)?;
    let mut extra = [0u8; 1];
    if reader.read(&mut extra)? != 0 {
        return Err(GsfError::Data("trailing bytes after clip pixels".into()));
    }
    Ok(Clip {
        t,
        c,
        h,
        w,
        pixels,
        label: 0,
    })
}

fn truncated(e: io::Error) -> GsfError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        GsfError::Data("clip file is truncated".into())
    } else {
        GsfError::Io(e)
    }
}

pub fn save_clip(path: &Path, clip: &Clip) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    write_clip(&mut f, clip)?;
    f.flush()?;
    Ok(())
}

pub fn load_clip(path: &Path) -> Result<Clip> {
    let bytes = fs::read(path)?;
    read_clip(&mut bytes.as_slice())
}

/// Clips with shared geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipDataset {
    pub clips: Vec<Clip>,
}

impl ClipDataset {
    pub fn new(clips: Vec<Clip>) -> Result<Self> {
        let Some(first) = clips.first() else {
            return Err(GsfError::Data("dataset is empty".into()));
        };
        let dims = (first.t, first.c, first.h, first.w);
        if let Some(bad) = clips.iter().find(|c| (c.t, c.c, c.h, c.w) != dims) {
            return Err(GsfError::Data(format!(
                "clip of {}×{}×{}×{} in a dataset of {}×{}×{}×{}",
                bad.t, bad.c, bad.h, bad.w, dims.0, dims.1, dims.2, dims.3
            )));
        }
        Ok(ClipDataset { clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// `(T, C, H, W)` of every clip.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let c = &self.clips[0];
        (c.t, c.c, c.h, c.w)
    }

    pub fn num_classes(&self) -> usize {
        self.clips.iter().map(|c| c.label + 1).max().unwrap_or(0)
    }

    /// Writes `<stem>_NNNNN.gsfv` clips into `dir` and the listing to
    /// `dir/<stem>.tsv`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let mut listing = String::new();
        for (i, clip) in self.clips.iter().enumerate() {
            let name = format!("{stem}_{i:05}.gsfv");
            save_clip(&dir.join(&name), clip)?;
            listing.push_str(&format!("{name}\t{}\n", clip.label));
        }
        let path = dir.join(format!("{stem}.tsv"));
        fs::write(&path, listing)?;
        Ok(path)
    }

    pub fn load(listing: &Path) -> Result<Self> {
        let text = fs::read_to_string(listing)?;
        let base = listing.parent().unwrap_or(Path::new("."));
        let mut clips = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let Some((path, label)) = line.split_once('\t') else {
                return Err(GsfError::Data(format!(
                    "{}:{}: expected path<TAB>label",
                    listing.display(),
                    n + 1
                )));
            };
            let label: usize = label
                .trim()
                .parse()
                .map_err(|_| GsfError::Data(format!("{}:{}: bad label `{label}`", listing.display(), n + 1)))?;
            let p = Path::new(path);
            let p = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            let mut clip = load_clip(&p)?;
            clip.label = label;
            clips.push(clip);
        }
        Self::new(clips)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    TrainJitter,
    EvalCenter,
}

/// Frame indices drawn from `t` equal segments of a clip of `len` frames.
pub fn sample_frames<R: Rng + ?Sized>(len: usize, t: usize, mode: SampleMode, rng: &mut R) -> Result<Vec<usize>> {
    if t == 0 {
        return config_err("cannot sample zero frames");
    }
    if len == 0 {
        return config_err("cannot sample from an empty clip");
    }
    Ok((0..t)
        .map(|i| match mode {
            SampleMode::EvalCenter => ((2 * i + 1) * len) / (2 * t),
            SampleMode::TrainJitter => {
                let (start, end) = segment(len, t, i);
                rng.gen_range(start..end)
            }
        })
        .collect())
}

/// Frame range `[start, end)` of segment `i`; never empty.
pub fn segment(len: usize, t: usize, i: usize) -> (usize, usize) {
    let start = (i * len / t).min(len - 1);
    let end = ((i + 1) * len / t).clamp(start + 1, len);
    (start, end)
}

/// Indices for `clips` evenly offset clips; one clip gives segment centers.
pub fn sample_clips(len: usize, t: usize, clips: usize) -> Result<Vec<Vec<usize>>> {
    if t == 0 || clips == 0 {
        return config_err("need at least one frame and one clip");
    }
    if len == 0 {
        return config_err("cannot sample from an empty clip");
    }
    Ok((0..clips)
        .map(|k| {
            (0..t)
                .map(|i| (((2 * k + 1) * len + 2 * clips * i * len) / (2 * clips * t)).min(len - 1))
                .collect()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    /// One clip, one center crop.
    Efficiency,
    /// Two clips, three crops each.
    Accuracy,
    /// Ten clips, three crops each.
    Accuracy10,
}

impl Protocol {
    pub fn clips(self) -> usize {
        match self {
            Protocol::Efficiency => 1,
            Protocol::Accuracy => 2,
            Protocol::Accuracy10 => 10,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Efficiency => "efficiency",
            Protocol::Accuracy => "accuracy",
            Protocol::Accuracy10 => "accuracy10",
        })
    }
}

impl FromStr for Protocol {
    type Err = GsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "efficiency" => Ok(Protocol::Efficiency),
            "accuracy" => Ok(Protocol::Accuracy),
            "accuracy10" => Ok(Protocol::Accuracy10),
            other => config_err(format!("unknown protocol `{other}` (efficiency, accuracy, accuracy10)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

/// `(clip index, crop)` pairs for a protocol.
///
/// Efficiency takes one centered `size` crop. Accuracy crops span the
/// shorter side and sit at the start, middle and end of the longer side, so
/// on a square frame all three coincide.
pub fn crops(protocol: Protocol, h: usize, w: usize, size: usize) -> Result<Vec<(usize, Rect)>> {
    if size == 0 || size > h || size > w {
        return config_err(format!("crop {size} does not fit a {h}×{w} frame"));
    }
    if protocol == Protocol::Efficiency {
        let center = Rect {
            top: (h - size) / 2,
            left: (w - size) / 2,
            size,
        };
        return Ok(vec![(0, center)]);
    }
    let size = h.min(w);
    let center = Rect {
        top: (h - size) / 2,
        left: (w - size) / 2,
        size,
    };
    let along: Vec<Rect> = if w >= h {
        [0, (w - size) / 2, w - size]
            .into_iter()
            .map(|left| Rect { left, ..center })
            .collect()
    } else {
        [0, (h - size) / 2, h - size]
            .into_iter()
            .map(|top| Rect { top, ..center })
            .collect()
    };
    Ok((0..protocol.clips())
        .flat_map(|k| along.iter().map(move |r| (k, *r)))
        .collect())
}

/// Writes `frames` of `clip`, cropped and optionally mirrored, as
/// normalized values `x/255 − 0.5` into `out` (T×C×size×size).
pub fn extract<E: Element>(clip: &Clip, frames: &[usize], rect: Rect, flip: bool, out: &mut [E]) {
    let s = rect.size;
    let mut o = 0;
    for &f in frames {
        for c in 0..clip.c {
            for y in 0..s {
                let row = ((f * clip.c + c) * clip.h + rect.top + y) * clip.w + rect.left;
                for x in 0..s {
                    let xx = if flip { s - 1 - x } else { x };
                    out[o] = E::from_f64(clip.pixels[row + xx] as f64 / 255.0 - 0.5);
                    o += 1;
                }
            }
        }
    }
}

/// One view per clip, stacked into a `B×T×C×size×size` tensor.
pub fn batch_tensor<E: Element>(views: &[(&Clip, Vec<usize>, Rect, bool)]) -> Result<Tensor<E>> {
    let Some((first, frames, rect, _)) = views.first() else {
        return Err(GsfError::Usage("empty batch".into()));
    };
    let (t, c, s) = (frames.len(), first.c, rect.size);
    let per = t * c * s * s;
    let mut data = vec![E::zero(); views.len() * per];
    for (i, (clip, frames, rect, flip)) in views.iter().enumerate() {
        if frames.len() != t || rect.size != s || clip.c != c {
            return Err(GsfError::Dimension("views in a batch differ in shape".into()));
        }
        extract(clip, frames, *rect, *flip, &mut data[i * per..(i + 1) * per]);
    }
    Tensor::from_vec(&[views.len(), t, c, s, s], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_sampling_examples() {
        let mut rng = seeded(0);
        assert_eq!(
            sample_frames(8, 8, SampleMode::EvalCenter, &mut rng).unwrap(),
            (0..8).collect::<Vec<_>>()
        );
        assert_eq!(
            sample_frames(16, 8, SampleMode::EvalCenter, &mut rng).unwrap(),
            vec![1, 3, 5, 7, 9, 11, 13, 15]
        );
        let short = sample_frames(5, 8, SampleMode::EvalCenter, &mut rng).unwrap();
        assert!(short.windows(2).all(|p| p[0] <= p[1]));
        assert_eq!(short.iter().collect::<std::collections::BTreeSet<_>>().len(), 5);
        assert!(sample_frames(5, 0, SampleMode::EvalCenter, &mut rng).is_err());
    }

    #[test]
    fn one_clip_sampling_is_segment_centers() {
        for (len, t) in [(8, 8), (16, 8), (5, 8), (30, 4)] {
            let centers = sample_frames(len, t, SampleMode::EvalCenter, &mut seeded(0)).unwrap();
            assert_eq!(sample_clips(len, t, 1).unwrap(), vec![centers]);
        }
    }

    #[test]
    fn crop_examples() {
        let c = crops(Protocol::Efficiency, 100, 120, 96).unwrap();
        assert_eq!(
            c,
            vec![(
                0,
                Rect {
                    top: 2,
                    left: 12,
                    size: 96
                }
            )]
        );
        let a = crops(Protocol::Accuracy, 16, 16, 12).unwrap();
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|(_, r)| *r == a[0].1));
        assert!(crops(Protocol::Accuracy, 8, 8, 9).is_err());
    }

    #[test]
    fn direction_right_without_noise() {
        let mut spec = SyntheticSpec::new(Task::Direction4, 8, 12, 12, 3);
        spec.noise = 0.0;
        spec.phase_jitter = false;
        spec.bar = 1;
        let clips = generate(&spec, 4).unwrap();
        let right = &clips[3];
        for t in 0..8 {
            let col = (t * spec.speed) % 12;
            let f = right.frame(t);
            assert!((0..12).all(|y| f[y * 12 + col] == FOREGROUND));
            assert_eq!(f.iter().filter(|&&p| p == FOREGROUND).count(), 12);
        }
    }

    #[test]
    fn order_pairs_are_reversals() {
        let spec = SyntheticSpec::new(Task::Order2, 6, 10, 10, 4);
        let clips = generate(&spec, 6).unwrap();
        for pair in clips.chunks(2) {
            assert_eq!(pair[0].label, 0);
            assert_eq!(pair[1], pair[0].reversed(1));
        }
    }

    #[test]
    fn degenerate_geometry_is_rejected() {
        let mut spec = SyntheticSpec::new(Task::Direction4, 4, 6, 6, 0);
        spec.bar = 6;
        assert!(matches!(generate(&spec, 4), Err(GsfError::Config(_))));
        let spec = SyntheticSpec::new(Task::Order2, 4, 6, 6, 0);
        assert!(generate(&spec, 1).is_err());
    }

    #[test]
    fn clip_bytes_round_trip() {
        let spec = SyntheticSpec::new(Task::Direction4, 3, 5, 7, 1);
        let clip = generate(&spec, 4).unwrap().remove(2);
        let mut buf = Vec::new();
        write_clip(&mut buf, &clip).unwrap();
        assert_eq!(&buf[..4], b"GSFV");
        assert_eq!(buf.len(), 20 + 3 * 5 * 7);
        let back = read_clip(&mut buf.as_slice()).unwrap();
        assert_eq!(back.pixels, clip.pixels);
        assert!(matches!(read_clip(&mut &buf[..30]), Err(GsfError::Data(_))));
        buf[0] = b'X';
        assert!(matches!(read_clip(&mut buf.as_slice()), Err(GsfError::Data(_))));
    }

    #[test]
    fn flip_remaps_horizontal_directions() {
        assert_eq!(Task::Direction4.flip_label(2), 3);
        assert_eq!(Task::Direction4.flip_label(3), 2);
        assert_eq!(Task::Direction4.flip_label(0), 0);
        assert_eq!(Task::Order2.flip_label(1), 1);
    }
}
