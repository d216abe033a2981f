//! Frames, patch tokenization, the segment layout of the concatenated token
//! sequence, and the shared video encoder.
//!
//! The sequence always has the same length for a given configuration. A
//! missing or masked segment keeps its rows; they are set to exact zeros and
//! its availability flag is cleared.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Rgb,
    X,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Rgb, Modality::X];
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Rgb => f.write_str("rgb"),
            Modality::X => f.write_str("x"),
        }
    }
}

/// One single-modality image with values in `[0, 1]`, shaped `H×W×ch`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub modality: Modality,
    pub pixels: Tensor,
    pub timestamp: usize,
}

impl Frame {
    pub fn new(modality: Modality, pixels: Tensor, timestamp: usize) -> Result<Self> {
        if pixels.shape().len() != 3 {
            return Err(Error::Dimension(format!(
                "frame pixels must be H×W×ch, got {:?}",
                pixels.shape()
            )));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("frame pixel outside [0, 1]".into()));
        }
        Ok(Frame {
            modality,
            pixels,
            timestamp,
        })
    }

    pub fn zeros(modality: Modality, size: usize, channels: usize, timestamp: usize) -> Self {
        Frame {
            modality,
            pixels: Tensor::zeros([size, size, channels]),
            timestamp,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Splits a frame into non-overlapping `patch×patch` tiles in row-major scan
/// order; each tile is flattened row-major (row, column, channel).
pub fn patchify(frame: &Frame, patch: usize) -> Result<Tensor> {
    let (h, w, ch) = (frame.height(), frame.width(), frame.channels());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension(format!(
            "frame {h}×{w} is not divisible into {patch}×{patch} patches"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let dim = patch * patch * ch;
    let px = frame.pixels.data();
    let mut out = Vec::with_capacity(ph * pw * dim);
    for py in 0..ph {
        for pxi in 0..pw {
            for r in 0..patch {
                let y = py * patch + r;
                let start = (y * w + pxi * patch) * ch;
                out.extend_from_slice(&px[start..start + patch * ch]);
            }
        }
    }
    Tensor::new([ph * pw, dim], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    Search,
    /// Clip frame `i`, numbered from 1.
    Clip(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub id: usize,
    pub modality: Modality,
    pub kind: SegmentKind,
    pub start: usize,
    pub count: usize,
}

impl Segment {
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.count
    }
}

/// Ordered segments tiling `[0, L)`:
/// `[RGB-search, X-search, RGB-clip1, X-clip1, …, RGB-clipN, X-clipN]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    segments: Vec<Segment>,
    n_clips: usize,
}

pub fn assemble_layout(n_clips: usize, search_tokens: usize, clip_tokens: usize) -> Result<SegmentLayout> {
    if n_clips == 0 {
        return Err(Error::Contract("a layout needs at least one clip frame".into()));
    }
    if search_tokens == 0 || clip_tokens == 0 {
        return Err(Error::Contract("token counts must be positive".into()));
    }
    let mut segments = Vec::with_capacity(2 + 2 * n_clips);
    let mut start = 0;
    let kinds = std::iter::once((SegmentKind::Search, search_tokens))
        .chain((1..=n_clips).map(|i| (SegmentKind::Clip(i), clip_tokens)));
    for (kind, count) in kinds {
        for modality in Modality::BOTH {
            segments.push(Segment {
                id: segments.len(),
                modality,
                kind,
                start,
                count,
            });
            start += count;
        }
    }
    Ok(SegmentLayout { segments, n_clips })
}

impl SegmentLayout {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn n_clips(&self) -> usize {
        self.n_clips
    }

    /// Total token count `L`.
    pub fn total(&self) -> usize {
        self.segments.last().map_or(0, |s| s.start + s.count)
    }

    pub fn find(&self, modality: Modality, kind: SegmentKind) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| s.modality == modality && s.kind == kind)
    }

    pub fn index_of(&self, modality: Modality, kind: SegmentKind) -> Option<usize> {
        self.find(modality, kind).map(|s| s.id)
    }

    /// Per-row keep flags derived from per-segment availability.
    pub fn row_mask(&self, availability: &[bool]) -> Vec<bool> {
        let mut keep = vec![true; self.total()];
        for (seg, &avail) in self.segments.iter().zip(availability) {
            if !avail {
                keep[seg.rows()].iter_mut().for_each(|k| *k = false);
            }
        }
        keep
    }

    /// Fraction of the `n_clips + 1` timesteps (clip frames plus the search
    /// frame) at which at least one modality is unavailable.
    pub fn missing_rate(&self, availability: &[bool]) -> f64 {
        let mut steps = 0;
        let mut missing = 0;
        for pair in self.segments.chunks(2) {
            steps += 1;
            if pair.iter().any(|s| !availability[s.id]) {
                missing += 1;
            }
        }
        missing as f64 / steps as f64
    }
}

/// The concatenated token matrix `L×C` on a tape, with its layout and
/// per-segment availability.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub layout: Arc<SegmentLayout>,
    pub availability: Vec<bool>,
}

impl TokenSequence {
    pub fn missing_rate(&self) -> f64 {
        self.layout.missing_rate(&self.availability)
    }

    pub fn with_tokens(&self, tokens: Var) -> TokenSequence {
        TokenSequence {
            tokens,
            layout: Arc::clone(&self.layout),
            availability: self.availability.clone(),
        }
    }

    /// Zeroes one segment and clears its flag. Zeroing an already-zero segment
    /// leaves the values unchanged.
    pub fn zero_segment(&self, tape: &mut Tape, segment: usize) -> Result<TokenSequence> {
        let mut availability = self.availability.clone();
        availability[segment] = false;
        let keep = self.layout.row_mask(&availability);
        let tokens = tape.mask_rows(self.tokens, &keep)?;
        Ok(TokenSequence {
            tokens,
            layout: Arc::clone(&self.layout),
            availability,
        })
    }
}

/// Frames for every segment of a layout, in layout order, with availability.
/// Unavailable segments are expected to carry zero frames.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    pub frames: Vec<Frame>,
    pub availability: Vec<bool>,
}

struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1: ParamId,
    fc1_b: ParamId,
    fc2: ParamId,
    fc2_b: ParamId,
}

/// Patch embedding, learned positional embedding and pre-norm transformer
/// blocks over the whole concatenated sequence.
pub struct VideoEncoder {
    config: ModelConfig,
    layout: Arc<SegmentLayout>,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParams>,
    final_g: ParamId,
    final_b: ParamId,
}

impl VideoEncoder {
    pub fn new(config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(assemble_layout(
            config.n_clips,
            config.search_tokens(),
            config.clip_tokens(),
        )?);
        let c = config.embed_dim;
        let p = config.patch_dim();
        let l = layout.total();
        let hidden = c * config.mlp_ratio;
        let patch_w = store.add(
            "encoder.patch.w",
            init::normal_tensor(rng, &[p, c], (1.0 / p as f64).sqrt()),
        )?;
        let patch_b = store.add("encoder.patch.b", init::zeros(&[c]))?;
        let pos = store.add("encoder.pos", init::normal_tensor(rng, &[l, c], 0.02))?;
        let mut blocks = Vec::with_capacity(config.encoder_blocks);
        let std = (1.0 / c as f64).sqrt();
        for b in 0..config.encoder_blocks {
            let name = |s: &str| format!("encoder.block{b}.{s}");
            blocks.push(BlockParams {
                ln1_g: store.add(name("ln1.g"), init::ones(&[c]))?,
                ln1_b: store.add(name("ln1.b"), init::zeros(&[c]))?,
                wq: store.add(name("attn.wq"), init::normal_tensor(rng, &[c, c], std))?,
                wk: store.add(name("attn.wk"), init::normal_tensor(rng, &[c, c], std))?,
                wv: store.add(name("attn.wv"), init::normal_tensor(rng, &[c, c], std))?,
                wo: store.add(name("attn.wo"), init::normal_tensor(rng, &[c, c], std * 0.5))?,
                bo: store.add(name("attn.bo"), init::zeros(&[c]))?,
                ln2_g: store.add(name("ln2.g"), init::ones(&[c]))?,
                ln2_b: store.add(name("ln2.b"), init::zeros(&[c]))?,
                fc1: store.add(name("mlp.fc1"), init::normal_tensor(rng, &[c, hidden], std))?,
                fc1_b: store.add(name("mlp.fc1_b"), init::zeros(&[hidden]))?,
                fc2: store.add(
                    name("mlp.fc2"),
                    init::normal_tensor(rng, &[hidden, c], (1.0 / hidden as f64).sqrt() * 0.5),
                )?,
                fc2_b: store.add(name("mlp.fc2_b"), init::zeros(&[c]))?,
            });
        }
        let final_g = store.add("encoder.final.g", init::ones(&[c]))?;
        let final_b = store.add("encoder.final.b", init::zeros(&[c]))?;
        Ok(VideoEncoder {
            config: config.clone(),
            layout,
            patch_w,
            patch_b,
            pos,
            blocks,
            final_g,
            final_b,
        })
    }

    pub fn layout(&self) -> &Arc<SegmentLayout> {
        &self.layout
    }

    /// Stacks the patch tokens of every segment in layout order.
    pub fn patch_matrix(&self, input: &EncoderInput) -> Result<Tensor> {
        let segs = self.layout.segments();
        if input.frames.len() != segs.len() || input.availability.len() != segs.len() {
            return Err(Error::Contract(format!(
                "layout has {} segments but {} frames and {} availability flags were given",
                segs.len(),
                input.frames.len(),
                input.availability.len()
            )));
        }
        let mut data = Vec::with_capacity(self.layout.total() * self.config.patch_dim());
        for (seg, frame) in segs.iter().zip(&input.frames) {
            if frame.modality != seg.modality {
                return Err(Error::Contract(format!(
                    "segment {} expects a {} frame, got {}",
                    seg.id, seg.modality, frame.modality
                )));
            }
            let tokens = patchify(frame, self.config.patch)?;
            if tokens.shape() != [seg.count, self.config.patch_dim()] {
                return Err(Error::Contract(format!(
                    "segment {} needs {} tokens of width {}, frame gives {:?}",
                    seg.id,
                    seg.count,
                    self.config.patch_dim(),
                    tokens.shape()
                )));
            }
            data.extend_from_slice(tokens.data());
        }
        Tensor::new([self.layout.total(), self.config.patch_dim()], data)
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, input: &EncoderInput) -> Result<TokenSequence> {
        let patches = self.patch_matrix(input)?;
        let x = tape.constant(patches);
        let tokens = self.encode_patches(tape, store, x)?;
        let keep = self.layout.row_mask(&input.availability);
        let tokens = if keep.iter().all(|&k| k) {
            tokens
        } else {
            tape.mask_rows(tokens, &keep)?
        };
        Ok(TokenSequence {
            tokens,
            layout: Arc::clone(&self.layout),
            availability: input.availability.clone(),
        })
    }

    /// Runs the encoder on an `L×patch_dim` matrix without any zeroing.
    pub fn encode_patches(&self, tape: &mut Tape, store: &ParamStore, patches: Var) -> Result<Var> {
        let pw = tape.param(store, self.patch_w);
        let pb = tape.param(store, self.patch_b);
        let pos = tape.param(store, self.pos);
        let x = tape.matmul(patches, pw)?;
        let x = tape.add_row(x, pb)?;
        let mut x = tape.add(x, pos)?;
        for block in &self.blocks {
            x = self.block(tape, store, block, x)?;
        }
        let g = tape.param(store, self.final_g);
        let b = tape.param(store, self.final_b);
        tape.layer_norm(x, g, b)
    }

    fn block(&self, tape: &mut Tape, store: &ParamStore, p: &BlockParams, x: Var) -> Result<Var> {
        let c = self.config.embed_dim;
        let heads = self.config.heads;
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();

        let g = tape.param(store, p.ln1_g);
        let b = tape.param(store, p.ln1_b);
        let h = tape.layer_norm(x, g, b)?;
        let wq = tape.param(store, p.wq);
        let wk = tape.param(store, p.wk);
        let wv = tape.param(store, p.wv);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * d, d)?;
            let kh = tape.slice_cols(k, head * d, d)?;
            let vh = tape.slice_cols(v, head * d, d)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.row_softmax(scores)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let wo = tape.param(store, p.wo);
        let bo = tape.param(store, p.bo);
        let o = tape.matmul(o, wo)?;
        let o = tape.add_row(o, bo)?;
        let x = tape.add(x, o)?;

        let g = tape.param(store, p.ln2_g);
        let b = tape.param(store, p.ln2_b);
        let h = tape.layer_norm(x, g, b)?;
        let fc1 = tape.param(store, p.fc1);
        let fc1_b = tape.param(store, p.fc1_b);
        let fc2 = tape.param(store, p.fc2);
        let fc2_b = tape.param(store, p.fc2_b);
        let h = tape.matmul(h, fc1)?;
        let h = tape.add_row(h, fc1_b)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, fc2)?;
        let h = tape.add_row(h, fc2_b)?;
        tape.add(x, h)
    }
}
