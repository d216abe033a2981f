//! Synthetic two-modality tracking videos.
//!
//! The RGB stream shows a bright rectangle over a textured background, with a
//! look-alike distractor, and goes dark during illumination-dropout windows.
//! The X stream is a clean thresholded signature of the target alone, except
//! during clutter windows when it fills with target-like blobs. The windows of
//! the two streams never overlap, so every frame shows the target clearly in
//! at least one modality.
//!
//! On disk a dataset is `root/manifest.json` plus
//! `root/video_%04d/{rgb,x}/frame_%04d.pgm` (8-bit binary PGM).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::BBox;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::tokens::{Frame, Modality};

const RGB_TARGET: f64 = 0.85;
const RGB_DIM_FACTOR: f64 = 0.15;
const RGB_NOISE: f64 = 0.02;
const X_BACKGROUND: f64 = 0.05;
const X_TARGET: f64 = 0.9;
const X_NOISE: f64 = 0.03;

/// Half-open frame interval `[start, end)`.
pub type Window = [usize; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    None,
    /// Explicit windows per modality.
    Fixed { rgb: Vec<Window>, x: Vec<Window> },
    /// `rgb` and `x` windows with lengths in `[min_len, max_len]`, placed so
    /// that no frame is corrupted in both streams.
    Random {
        rgb: usize,
        x: usize,
        min_len: usize,
        max_len: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub frame_size: usize,
    pub length: usize,
    pub target_min: usize,
    pub target_max: usize,
    /// Speed bounds in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Per-frame probability of picking a new heading.
    pub turn_prob: f64,
    pub distractors: usize,
    pub corruption: Corruption,
    /// Number of clutter blobs drawn per frame in an X window.
    pub clutter_blobs: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            frame_size: 64,
            length: 60,
            target_min: 8,
            target_max: 16,
            speed_min: 0.5,
            speed_max: 2.0,
            turn_prob: 0.05,
            distractors: 1,
            corruption: Corruption::Random {
                rgb: 1,
                x: 1,
                min_len: 8,
                max_len: 16,
            },
            clutter_blobs: 6,
        }
    }
}

fn overlaps(a: &Window, b: &Window) -> bool {
    a[0] < b[1] && b[0] < a[1]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.length == 0 || self.frame_size == 0 {
            return bad("frame size and length must be positive".into());
        }
        if self.target_min == 0 || self.target_min > self.target_max {
            return bad(format!("target size range {}..={} is empty", self.target_min, self.target_max));
        }
        if self.target_max >= self.frame_size {
            return bad(format!(
                "target up to {} px does not fit in a {} px frame",
                self.target_max, self.frame_size
            ));
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return bad(format!("speed range {}..{} is invalid", self.speed_min, self.speed_max));
        }
        if !(0.0..=1.0).contains(&self.turn_prob) {
            return bad(format!("turn probability {} outside [0, 1]", self.turn_prob));
        }
        match &self.corruption {
            Corruption::None => {}
            Corruption::Fixed { rgb, x } => {
                for w in rgb.iter().chain(x) {
                    if w[0] >= w[1] || w[1] > self.length {
                        return bad(format!("window {w:?} outside 0..{}", self.length));
                    }
                }
                if rgb.iter().any(|a| x.iter().any(|b| overlaps(a, b))) {
                    return bad("RGB and X corruption windows overlap".into());
                }
            }
            Corruption::Random { rgb, x, min_len, max_len } => {
                if *min_len == 0 || min_len > max_len {
                    return bad(format!("window length range {min_len}..={max_len} is empty"));
                }
                if (rgb + x) * max_len > self.length {
                    return bad(format!(
                        "{} windows of up to {max_len} frames do not fit in {} frames",
                        rgb + x,
                        self.length
                    ));
                }
            }
        }
        Ok(())
    }
}

/// An 8-bit single-channel image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    fn from_values(width: usize, height: usize, values: &[f64]) -> Self {
        GrayImage {
            width,
            height,
            data: values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        f64::from(self.data[y * self.width + x]) / 255.0
    }

    /// Mean value over the pixels whose centers fall inside `b` (pixel units).
    pub fn mean_in(&self, b: &BBox) -> Option<f64> {
        let (x0, y0, x1, y1) = pixel_span(b, self.width, self.height);
        let mut s = 0.0;
        let mut n = 0usize;
        for y in y0..y1 {
            for x in x0..x1 {
                s += self.value(x, y);
                n += 1;
            }
        }
        (n > 0).then(|| s / n as f64)
    }

    /// Mean value over the pixels whose centers fall outside `b`.
    pub fn mean_outside(&self, b: &BBox) -> f64 {
        let (x0, y0, x1, y1) = pixel_span(b, self.width, self.height);
        let mut s = 0.0;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if !(x0..x1).contains(&x) || !(y0..y1).contains(&y) {
                    s += self.value(x, y);
                    n += 1;
                }
            }
        }
        s / n.max(1) as f64
    }

    pub fn to_frame(&self, modality: Modality, timestamp: usize) -> Result<Frame> {
        let px = self.data.iter().map(|&v| f64::from(v) / 255.0).collect();
        Frame::new(modality, Tensor::new([self.height, self.width, 1], px)?, timestamp)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend_from_slice(&self.data);
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(path, "truncated PGM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P5" {
            return Err(Error::format(path, format!("expected P5, found {}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad PGM field `{s}`")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::format(path, format!("only 8-bit PGM is supported, maxval {maxval}")));
        }
        let data = bytes.get(pos..pos + width * height).ok_or_else(|| Error::format(path, "truncated PGM data"))?;
        Ok(GrayImage {
            width,
            height,
            data: data.to_vec(),
        })
    }
}

/// Integer pixel range `[x0, x1) × [y0, y1)` covered by a pixel-unit box.
fn pixel_span(b: &BBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let [x0, y0, x1, y1] = b.to_xyxy();
    let lo = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n);
    (lo(x0, width), lo(y0, height), lo(x1, width), lo(y1, height))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSequence {
    pub seed: u64,
    pub spec: SceneSpec,
    pub rgb: Vec<GrayImage>,
    pub x: Vec<GrayImage>,
    /// Ground truth in frame pixels.
    pub gt: Vec<BBox>,
    pub rgb_windows: Vec<Window>,
    pub x_windows: Vec<Window>,
}

impl RenderedSequence {
    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    pub fn image(&self, modality: Modality, t: usize) -> &GrayImage {
        match modality {
            Modality::Rgb => &self.rgb[t],
            Modality::X => &self.x[t],
        }
    }

    pub fn in_window(windows: &[Window], t: usize) -> bool {
        windows.iter().any(|w| (w[0]..w[1]).contains(&t))
    }
}

struct Mover {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
}

impl Mover {
    fn spawn(spec: &SceneSpec, rng: &mut Rng) -> Self {
        let side = |rng: &mut Rng| rng.gen_range(spec.target_min..=spec.target_max) as f64;
        let (w, h) = (side(rng), side(rng));
        let f = spec.frame_size as f64;
        let mut m = Mover {
            x: rng.gen_range(w / 2.0..=f - w / 2.0),
            y: rng.gen_range(h / 2.0..=f - h / 2.0),
            w,
            h,
            vx: 0.0,
            vy: 0.0,
        };
        m.turn(spec, rng);
        m
    }

    fn turn(&mut self, spec: &SceneSpec, rng: &mut Rng) {
        let speed = rng.gen_range(spec.speed_min..=spec.speed_max);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        self.vx = speed * angle.cos();
        self.vy = speed * angle.sin();
    }

    /// One step with reflection off the frame borders.
    fn step(&mut self, spec: &SceneSpec, rng: &mut Rng) {
        if rng.gen_bool(spec.turn_prob) {
            self.turn(spec, rng);
        }
        let f = spec.frame_size as f64;
        let bounce = |p: &mut f64, v: &mut f64, half: f64| {
            *p += *v;
            if *p < half {
                *p = 2.0 * half - *p;
                *v = -*v;
            }
            if *p > f - half {
                *p = 2.0 * (f - half) - *p;
                *v = -*v;
            }
            *p = p.clamp(half, f - half);
        };
        bounce(&mut self.x, &mut self.vx, self.w / 2.0);
        bounce(&mut self.y, &mut self.vy, self.h / 2.0);
    }

    fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

fn fill(canvas: &mut [f64], size: usize, b: &BBox, value: f64) {
    let (x0, y0, x1, y1) = pixel_span(b, size, size);
    for y in y0..y1 {
        for x in x0..x1 {
            canvas[y * size + x] = value;
        }
    }
}

fn sample_windows(spec: &SceneSpec, rng: &mut Rng) -> Result<(Vec<Window>, Vec<Window>)> {
    match &spec.corruption {
        Corruption::None => Ok((vec![], vec![])),
        Corruption::Fixed { rgb, x } => Ok((rgb.clone(), x.clone())),
        &Corruption::Random { rgb, x, min_len, max_len } => {
            for _ in 0..1000 {
                let mut all: Vec<Window> = Vec::with_capacity(rgb + x);
                let mut ok = true;
                for _ in 0..rgb + x {
                    let len = rng.gen_range(min_len..=max_len);
                    let start = rng.gen_range(0..=spec.length - len);
                    let w = [start, start + len];
                    if all.iter().any(|o| overlaps(o, &w)) {
                        ok = false;
                        break;
                    }
                    all.push(w);
                }
                if ok {
                    let x_windows = all.split_off(rgb);
                    return Ok((all, x_windows));
                }
            }
            Err(Error::Validation("could not place non-overlapping corruption windows".into()))
        }
    }
}

pub fn generate_sequence(spec: &SceneSpec, seed: u64) -> Result<RenderedSequence> {
    spec.validate()?;
    let size = spec.frame_size;
    let mut layout_rng = rng::stream(seed, "scene.layout");
    let mut motion_rng = rng::stream(seed, "scene.motion");
    let mut noise_rng = rng::stream(seed, "scene.noise");
    let (rgb_windows, x_windows) = sample_windows(spec, &mut layout_rng)?;

    let f1 = layout_rng.gen_range(0.1..0.4);
    let f2 = layout_rng.gen_range(0.1..0.4);
    let p1 = layout_rng.gen_range(0.0..std::f64::consts::TAU);
    let p2 = layout_rng.gen_range(0.0..std::f64::consts::TAU);
    let background: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            0.35 + 0.1 * (f1 * x + p1).sin() * (f2 * y + p2).sin() + layout_rng.gen_range(-0.04..0.04)
        })
        .collect();

    let mut target = Mover::spawn(spec, &mut motion_rng);
    let mut distractors: Vec<Mover> = (0..spec.distractors).map(|_| Mover::spawn(spec, &mut motion_rng)).collect();
    let rgb_noise = Normal::new(0.0, RGB_NOISE).expect("valid sigma");
    let x_noise = Normal::new(0.0, X_NOISE).expect("valid sigma");

    let mut out = RenderedSequence {
        seed,
        spec: spec.clone(),
        rgb: Vec::with_capacity(spec.length),
        x: Vec::with_capacity(spec.length),
        gt: Vec::with_capacity(spec.length),
        rgb_windows,
        x_windows,
    };
    for t in 0..spec.length {
        if t > 0 {
            target.step(spec, &mut motion_rng);
            distractors.iter_mut().for_each(|d| d.step(spec, &mut motion_rng));
        }
        let gt = target.bbox();

        let mut rgb = background.clone();
        for d in &distractors {
            fill(&mut rgb, size, &d.bbox(), RGB_TARGET);
        }
        fill(&mut rgb, size, &gt, RGB_TARGET);
        let dim = RenderedSequence::in_window(&out.rgb_windows, t);
        for v in rgb.iter_mut() {
            if dim {
                *v *= RGB_DIM_FACTOR;
            }
            *v += rgb_noise.sample(&mut noise_rng);
        }

        let mut x = vec![X_BACKGROUND; size * size];
        if RenderedSequence::in_window(&out.x_windows, t) {
            for _ in 0..spec.clutter_blobs {
                let w = noise_rng.gen_range(spec.target_min..=spec.target_max) as f64;
                let h = noise_rng.gen_range(spec.target_min..=spec.target_max) as f64;
                let cx = noise_rng.gen_range(0.0..size as f64);
                let cy = noise_rng.gen_range(0.0..size as f64);
                fill(&mut x, size, &BBox::new(cx, cy, w, h), X_TARGET);
            }
        }
        fill(&mut x, size, &gt, X_TARGET);
        for v in x.iter_mut() {
            *v += x_noise.sample(&mut noise_rng);
        }

        out.rgb.push(GrayImage::from_values(size, size, &rgb));
        out.x.push(GrayImage::from_values(size, size, &x));
        out.gt.push(gt);
    }
    Ok(out)
}

/// Square crop region in frame pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crop {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

pub const MIN_CROP_SIDE: f64 = 16.0;

impl Crop {
    /// Square of side `context · sqrt(w·h)` centered on `reference`, clamped
    /// to `[MIN_CROP_SIDE, frame_size]`.
    pub fn around(reference: &BBox, context: f64, frame_size: usize) -> Self {
        let side = (context * (reference.w.max(1.0) * reference.h.max(1.0)).sqrt()).clamp(MIN_CROP_SIDE, frame_size as f64);
        Crop {
            x0: reference.cx - side / 2.0,
            y0: reference.cy - side / 2.0,
            side,
        }
    }

    /// Frame-pixel box to crop-normalized coordinates.
    pub fn to_normalized(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.cx - self.x0) / self.side,
            (b.cy - self.y0) / self.side,
            b.w / self.side,
            b.h / self.side,
        )
    }

    pub fn to_frame(&self, b: &BBox) -> BBox {
        BBox::new(
            self.x0 + b.cx * self.side,
            self.y0 + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }

    /// Bilinear resample of the crop to `out×out`, zero outside the frame.
    pub fn sample(&self, image: &GrayImage, out: usize) -> Tensor {
        let scale = self.side / out as f64;
        let get = |x: isize, y: isize| -> f64 {
            if x < 0 || y < 0 || x as usize >= image.width || y as usize >= image.height {
                0.0
            } else {
                image.value(x as usize, y as usize)
            }
        };
        let mut data = Vec::with_capacity(out * out);
        for i in 0..out {
            let sy = self.y0 + (i as f64 + 0.5) * scale - 0.5;
            let y0 = sy.floor();
            let fy = sy - y0;
            for j in 0..out {
                let sx = self.x0 + (j as f64 + 0.5) * scale - 0.5;
                let x0 = sx.floor();
                let fx = sx - x0;
                let (xi, yi) = (x0 as isize, y0 as isize);
                let v = (1.0 - fy) * ((1.0 - fx) * get(xi, yi) + fx * get(xi + 1, yi))
                    + fy * ((1.0 - fx) * get(xi, yi + 1) + fx * get(xi + 1, yi + 1));
                data.push(v.clamp(0.0, 1.0));
            }
        }
        Tensor::new([out, out, 1], data).expect("finite bilinear samples")
    }
}

/// Crop geometry shared by training and tracking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub n_clips: usize,
    pub search_size: usize,
    pub clip_size: usize,
    pub context: f64,
}

/// Reference boxes are jittered by up to `center · sqrt(w·h)` in position and
/// by a factor `exp(±scale)` in size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub center: f64,
    pub scale: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter { center: 0.0, scale: 0.0 };

    pub fn apply(&self, b: &BBox, rng: &mut Rng) -> BBox {
        if self.center == 0.0 && self.scale == 0.0 {
            return *b;
        }
        let r = (b.w * b.h).sqrt();
        let s = if self.scale > 0.0 { rng.gen_range(-self.scale..self.scale).exp() } else { 1.0 };
        let dx = if self.center > 0.0 { rng.gen_range(-self.center..self.center) * r } else { 0.0 };
        let dy = if self.center > 0.0 { rng.gen_range(-self.center..self.center) * r } else { 0.0 };
        BBox::new(b.cx + dx, b.cy + dy, b.w * s, b.h * s)
    }
}

/// Clip frames for `t−N … t−1` (oldest first) and the search frames at `t`,
/// one per modality each, plus the search crop.
#[derive(Clone, Debug)]
pub struct CropSample {
    pub t: usize,
    /// `clips[i] = [rgb, x]` for clip `i + 1`, taken at `t − N + i`.
    pub clips: Vec<[Frame; 2]>,
    pub search: [Frame; 2],
    pub search_crop: Crop,
}

impl CropSample {
    /// Frames in segment-layout order: RGB-search, X-search, then RGB and X
    /// of each clip.
    pub fn frames(&self) -> Vec<Frame> {
        let mut f = Vec::with_capacity(2 + 2 * self.clips.len());
        f.extend(self.search.iter().cloned());
        for c in &self.clips {
            f.extend(c.iter().cloned());
        }
        f
    }
}

fn crop_pair(seq: &RenderedSequence, t: usize, crop: &Crop, out: usize) -> Result<[Frame; 2]> {
    Ok([
        Frame::new(Modality::Rgb, crop.sample(&seq.rgb[t], out), t)?,
        Frame::new(Modality::X, crop.sample(&seq.x[t], out), t)?,
    ])
}

/// Crops around caller-supplied reference boxes: `clip_refs[i]` for frame
/// `t − N + i`, and `search_ref` for frame `t`.
pub fn crop_with_refs(seq: &RenderedSequence, t: usize, cfg: &CropConfig, clip_refs: &[BBox], search_ref: &BBox) -> Result<CropSample> {
    let n = cfg.n_clips;
    if t < n || t >= seq.len() {
        return Err(Error::Contract(format!(
            "frame {t} needs {n} earlier frames and must be below {}",
            seq.len()
        )));
    }
    if clip_refs.len() != n {
        return Err(Error::Contract(format!("{} clip references for {n} clips", clip_refs.len())));
    }
    let size = seq.spec.frame_size;
    let mut clips = Vec::with_capacity(n);
    for (i, r) in clip_refs.iter().enumerate() {
        let crop = Crop::around(r, cfg.context, size);
        clips.push(crop_pair(seq, t - n + i, &crop, cfg.clip_size)?);
    }
    let search_crop = Crop::around(search_ref, cfg.context, size);
    let search = crop_pair(seq, t, &search_crop, cfg.search_size)?;
    Ok(CropSample {
        t,
        clips,
        search,
        search_crop,
    })
}

/// Training crops: clips centered on their own (jittered) ground truth, the
/// search region on the (jittered) ground truth of `t − 1`. Returns the sample
/// and the ground truth at `t` in normalized search coordinates.
pub fn crop_regions(seq: &RenderedSequence, t: usize, cfg: &CropConfig, jitter: &Jitter, rng: &mut Rng) -> Result<(CropSample, BBox)> {
    if t < cfg.n_clips {
        return Err(Error::Contract(format!("frame {t} has fewer than {} earlier frames", cfg.n_clips)));
    }
    let clip_refs: Vec<BBox> = (t - cfg.n_clips..t).map(|k| jitter.apply(&seq.gt[k], rng)).collect();
    let search_ref = jitter.apply(&seq.gt[t - 1], rng);
    let sample = crop_with_refs(seq, t, cfg, &clip_refs, &search_ref)?;
    let gt = sample.search_crop.to_normalized(&seq.gt[t]);
    Ok((sample, gt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub name: String,
    pub seed: u64,
    pub length: usize,
    /// `[cx, cy, w, h]` in pixels per frame.
    pub gt: Vec<[f64; 4]>,
    pub rgb_windows: Vec<Window>,
    pub x_windows: Vec<Window>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: SceneSpec,
    pub videos: Vec<VideoEntry>,
}

pub fn video_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, "video", index as u64)
}

pub fn generate_videos(spec: &SceneSpec, n_videos: usize, seed: u64) -> Result<Vec<RenderedSequence>> {
    (0..n_videos).map(|i| generate_sequence(spec, video_seed(seed, i))).collect()
}

fn frame_path(root: &Path, video: usize, modality: Modality, t: usize) -> PathBuf {
    root.join(format!("video_{video:04}"))
        .join(modality.to_string())
        .join(format!("frame_{t:04}.pgm"))
}

pub fn write_dataset(root: &Path, seed: u64, spec: &SceneSpec, videos: &[RenderedSequence]) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(videos.len());
    for (i, v) in videos.iter().enumerate() {
        for m in Modality::BOTH {
            let dir = root.join(format!("video_{i:04}")).join(m.to_string());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for t in 0..v.len() {
                v.image(m, t).write_pgm(&frame_path(root, i, m, t))?;
            }
        }
        entries.push(VideoEntry {
            name: format!("video_{i:04}"),
            seed: v.seed,
            length: v.len(),
            gt: v.gt.iter().map(BBox::to_array).collect(),
            rgb_windows: v.rgb_windows.clone(),
            x_windows: v.x_windows.clone(),
        });
    }
    let manifest = Manifest {
        seed,
        spec: spec.clone(),
        videos: entries,
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generates `n_videos` videos from per-video seeds and writes them under `root`.
pub fn make_dataset(root: &Path, spec: &SceneSpec, n_videos: usize, seed: u64) -> Result<Manifest> {
    let videos = generate_videos(spec, n_videos, seed)?;
    write_dataset(root, seed, spec, &videos)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Reads every video of a dataset back into memory.
pub fn load_dataset(root: &Path) -> Result<(Manifest, Vec<RenderedSequence>)> {
    let manifest = read_manifest(root)?;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for (i, entry) in manifest.videos.iter().enumerate() {
        if entry.gt.len() != entry.length {
            return Err(Error::format(
                root.join("manifest.json"),
                format!("{} lists {} boxes for {} frames", entry.name, entry.gt.len(), entry.length),
            ));
        }
        let read = |m| (0..entry.length).map(|t| GrayImage::read_pgm(&frame_path(root, i, m, t))).collect::<Result<Vec<_>>>();
        videos.push(RenderedSequence {
            seed: entry.seed,
            spec: manifest.spec.clone(),
            rgb: read(Modality::Rgb)?,
            x: read(Modality::X)?,
            gt: entry.gt.iter().map(|g| BBox::new(g[0], g[1], g[2], g[3])).collect(),
            rgb_windows: entry.rgb_windows.clone(),
            x_windows: entry.x_windows.clone(),
        });
    }
    Ok((manifest, videos))
}
