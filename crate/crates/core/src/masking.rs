//! Training-time masking of token segments.
//!
//! Video-level masking drops whole modality segments while guaranteeing that
//! every timestep keeps at least one modality. Random token masking and tube
//! masking are the availability-agnostic baselines: they zero rows but leave
//! the availability flags set.
//!
//! Patterns are pairs indexed `[x, rgb]`: index 0 keeps or drops the X
//! segment, index 1 the RGB segment. `[1, 0]` therefore drops RGB.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tokens::{Modality, SegmentKind, SegmentLayout, TokenSequence};

/// Keep bits `[keep_x, keep_rgb]`.
pub type Pattern = [bool; 2];

pub const KEEP_BOTH: Pattern = [true, true];
pub const DROP_RGB: Pattern = [true, false];
pub const DROP_X: Pattern = [false, true];

/// Search patterns are drawn uniformly from this multiset.
pub const SEARCH_PATTERNS: [Pattern; 5] = [KEEP_BOTH, KEEP_BOTH, KEEP_BOTH, DROP_RGB, DROP_X];
/// Clip patterns are drawn uniformly from this set.
pub const CLIP_PATTERNS: [Pattern; 3] = [KEEP_BOTH, DROP_RGB, DROP_X];

fn keeps(pattern: Pattern, modality: Modality) -> bool {
    match modality {
        Modality::X => pattern[0],
        Modality::Rgb => pattern[1],
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskDecision {
    pub search: Pattern,
    /// Set when the `p < α` draw succeeded; `clips` is present exactly then.
    pub clip_masking_applied: bool,
    pub clips: Option<Vec<Pattern>>,
}

impl MaskDecision {
    pub fn keep_all() -> Self {
        MaskDecision {
            search: KEEP_BOTH,
            clip_masking_applied: false,
            clips: None,
        }
    }

    /// Per-segment availability after applying this decision to `layout`.
    pub fn availability(&self, layout: &SegmentLayout) -> Result<Vec<bool>> {
        if let Some(clips) = &self.clips {
            if clips.len() != layout.n_clips() {
                return Err(Error::Contract(format!(
                    "mask decision has {} clip patterns but the layout has {} clips",
                    clips.len(),
                    layout.n_clips()
                )));
            }
        }
        Ok(layout
            .segments()
            .iter()
            .map(|seg| match seg.kind {
                SegmentKind::Search => keeps(self.search, seg.modality),
                SegmentKind::Clip(i) => self
                    .clips
                    .as_ref()
                    .map_or(true, |c| keeps(c[i - 1], seg.modality)),
            })
            .collect())
    }

    pub fn record(&self, seed: u64) -> MaskRecord {
        let bits = |p: Pattern| [u8::from(p[0]), u8::from(p[1])];
        MaskRecord {
            seed,
            search: bits(self.search),
            applied: self.clip_masking_applied,
            clips: self.clips.iter().flatten().map(|&p| bits(p)).collect(),
        }
    }
}

/// One audit line: `{"seed":…,"search":[1,0],"applied":true,"clips":[[1,1],…]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub seed: u64,
    pub search: [u8; 2],
    pub applied: bool,
    pub clips: Vec<[u8; 2]>,
}

/// Independent streams for the three kinds of draw.
#[derive(Clone, Debug)]
pub struct MaskSampler {
    seed: u64,
    search: Rng,
    p_draw: Rng,
    clips: Rng,
}

impl MaskSampler {
    pub fn new(seed: u64) -> Self {
        MaskSampler {
            seed,
            search: rng::stream(seed, "mask.search"),
            p_draw: rng::stream(seed, "mask.p"),
            clips: rng::stream(seed, "mask.clips"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

pub fn sample_mask_decision(sampler: &mut MaskSampler, n_clips: usize, alpha: f64) -> Result<MaskDecision> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} is outside [0, 1]")));
    }
    let search = SEARCH_PATTERNS[sampler.search.gen_range(0..SEARCH_PATTERNS.len())];
    let p: f64 = sampler.p_draw.gen();
    let applied = p < alpha;
    let clips = applied.then(|| {
        (0..n_clips)
            .map(|_| CLIP_PATTERNS[sampler.clips.gen_range(0..CLIP_PATTERNS.len())])
            .collect()
    });
    Ok(MaskDecision {
        search,
        clip_masking_applied: applied,
        clips,
    })
}

/// Zeroes the segments the decision drops and clears their flags. Kept rows
/// are copied bit for bit; an all-keep decision returns the input unchanged.
pub fn apply_mask(tape: &mut Tape, seq: &TokenSequence, decision: &MaskDecision) -> Result<TokenSequence> {
    let keep = decision.availability(&seq.layout)?;
    let availability: Vec<bool> = seq.availability.iter().zip(&keep).map(|(&a, &k)| a && k).collect();
    if availability == seq.availability {
        return Ok(seq.clone());
    }
    let rows = seq.layout.row_mask(&availability);
    let tokens = tape.mask_rows(seq.tokens, &rows)?;
    Ok(TokenSequence {
        tokens,
        layout: seq.layout.clone(),
        availability,
    })
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..=1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::Config(format!("mask ratio {ratio} is outside [0, 1]")))
    }
}

fn zero_rows(tape: &mut Tape, seq: &TokenSequence, keep: &[bool]) -> Result<TokenSequence> {
    if keep.iter().all(|&k| k) {
        return Ok(seq.clone());
    }
    let tokens = tape.mask_rows(seq.tokens, keep)?;
    Ok(seq.with_tokens(tokens))
}

/// Zeroes each token row independently with probability `ratio`.
pub fn random_token_mask(tape: &mut Tape, seq: &TokenSequence, ratio: f64, rng: &mut Rng) -> Result<TokenSequence> {
    check_ratio(ratio)?;
    let keep: Vec<bool> = (0..seq.layout.total()).map(|_| !rng.gen_bool(ratio)).collect();
    zero_rows(tape, seq, &keep)
}

/// Zeroes `⌊ratio · clip_tokens⌋` spatial positions per modality, the same
/// positions in every clip frame of that modality. Search segments are kept.
pub fn tube_mask(tape: &mut Tape, seq: &TokenSequence, ratio: f64, rng: &mut Rng) -> Result<TokenSequence> {
    check_ratio(ratio)?;
    let layout = &seq.layout;
    let clip_counts: Vec<usize> = layout
        .segments()
        .iter()
        .filter(|s| matches!(s.kind, SegmentKind::Clip(_)))
        .map(|s| s.count)
        .collect();
    let per_clip = clip_counts[0];
    if clip_counts.iter().any(|&c| c != per_clip) {
        return Err(Error::Contract(format!(
            "tube masking needs equal clip token counts, got {clip_counts:?}"
        )));
    }
    let holes = (ratio * per_clip as f64).floor() as usize;
    let mut keep = vec![true; layout.total()];
    for modality in Modality::BOTH {
        let positions = sample(rng, per_clip, holes);
        for seg in layout.segments() {
            if seg.modality == modality && matches!(seg.kind, SegmentKind::Clip(_)) {
                for p in positions.iter() {
                    keep[seg.start + p] = false;
                }
            }
        }
    }
    zero_rows(tape, seq, &keep)
}

/// Which masking code path training runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    VideoLevel,
    None,
    Random,
    Tube,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 4] = [
        MaskStrategy::VideoLevel,
        MaskStrategy::None,
        MaskStrategy::Random,
        MaskStrategy::Tube,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::VideoLevel => "video_level",
            MaskStrategy::None => "none",
            MaskStrategy::Random => "random",
            MaskStrategy::Tube => "tube",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskStrategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown masking strategy `{s}` (video_level, none, random, tube)")))
    }
}

/// Call counters for the masking entry points, so a caller can prove which
/// code path ran.
#[derive(Debug, Default)]
pub struct MaskCounters {
    pub decisions: AtomicUsize,
    pub video_level: AtomicUsize,
    pub random: AtomicUsize,
    pub tube: AtomicUsize,
}

impl MaskCounters {
    pub fn total(&self) -> usize {
        [&self.decisions, &self.video_level, &self.random, &self.tube]
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .sum()
    }

    pub fn bump(counter: &AtomicUsize) {
        counter.fetch_add(1, Ordering::Relaxed);
    }
}
