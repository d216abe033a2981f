//! Missing-modality schedules and tracking metrics.
//!
//! A schedule marks, per frame, which modalities are available. Exactly
//! `⌊r·T⌋` frames lose one modality and no frame ever loses both.
//!
//! - `Random`: the affected frames are a uniform sample; each drops a
//!   coin-chosen modality.
//! - `Switched`: the affected frames form blocks of `⌈T/10⌉` frames whose
//!   dropped modality alternates from block to block.
//! - `Prolonged`: one contiguous run drops a single coin-chosen modality.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::BBox;
use crate::rng;
use crate::synth::CropSample;
use crate::tokens::{EncoderInput, Frame, Modality};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingKind {
    Random,
    Switched,
    Prolonged,
}

impl MissingKind {
    pub const ALL: [MissingKind; 3] = [MissingKind::Random, MissingKind::Switched, MissingKind::Prolonged];

    pub fn name(self) -> &'static str {
        match self {
            MissingKind::Random => "random",
            MissingKind::Switched => "switched",
            MissingKind::Prolonged => "prolonged",
        }
    }
}

impl fmt::Display for MissingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MissingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MissingKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown missing pattern `{s}` (random, switched, prolonged)")))
    }
}

/// Availability bits per frame as `[rgb, x]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingSchedule {
    pub kind: MissingKind,
    pub rate: f64,
    pub seed: u64,
    pub pairs: Vec<[u8; 2]>,
}

impl MissingSchedule {
    pub fn all_available(len: usize) -> Self {
        MissingSchedule {
            kind: MissingKind::Random,
            rate: 0.0,
            seed: 0,
            pairs: vec![[1, 1]; len],
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn available(&self, t: usize, modality: Modality) -> bool {
        let p = self.pairs[t];
        match modality {
            Modality::Rgb => p[0] == 1,
            Modality::X => p[1] == 1,
        }
    }

    /// Frames missing at least one modality.
    pub fn affected(&self) -> usize {
        self.pairs.iter().filter(|p| p[0] == 0 || p[1] == 0).count()
    }

    pub fn both_missing(&self) -> usize {
        self.pairs.iter().filter(|p| p[0] == 0 && p[1] == 0).count()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: MissingSchedule = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if s.both_missing() > 0 {
            return Err(Error::format(path, "schedule has frames with both modalities missing"));
        }
        Ok(s)
    }
}

/// Availability pair for a frame that drops `modality`.
fn drop_pair(modality: Modality) -> [u8; 2] {
    match modality {
        Modality::Rgb => [0, 1],
        Modality::X => [1, 0],
    }
}

fn coin_modality(rng: &mut rng::Rng) -> Modality {
    if rng.gen_bool(0.5) {
        Modality::Rgb
    } else {
        Modality::X
    }
}

pub fn switched_block_len(len: usize) -> usize {
    len.div_ceil(10).max(1)
}

pub fn make_schedule(kind: MissingKind, len: usize, rate: f64, seed: u64) -> Result<MissingSchedule> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Validation(format!(
            "missing rate {rate} must lie in [0, 1); a rate of 1 would force frames with both modalities missing"
        )));
    }
    let mut rng = rng::stream(seed, "schedule");
    let n = (rate * len as f64).floor() as usize;
    let mut pairs = vec![[1u8, 1u8]; len];
    match kind {
        MissingKind::Random => {
            let mut frames = sample(&mut rng, len, n).into_vec();
            frames.sort_unstable();
            for t in frames {
                pairs[t] = drop_pair(coin_modality(&mut rng));
            }
        }
        MissingKind::Switched => {
            let b = switched_block_len(len);
            let slots: Vec<(usize, usize)> = (0..len).step_by(b).map(|s| (s, (s + b).min(len))).collect();
            let mut order: Vec<usize> = (0..slots.len()).collect();
            order.shuffle(&mut rng);
            let mut chosen = Vec::new();
            let mut capacity = 0;
            for i in order {
                if capacity >= n {
                    break;
                }
                capacity += slots[i].1 - slots[i].0;
                chosen.push(i);
            }
            chosen.sort_unstable();
            let mut modality = coin_modality(&mut rng);
            let mut remaining = n;
            for i in chosen {
                let (s, e) = slots[i];
                let take = (e - s).min(remaining);
                for p in &mut pairs[s..s + take] {
                    *p = drop_pair(modality);
                }
                remaining -= take;
                modality = match modality {
                    Modality::Rgb => Modality::X,
                    Modality::X => Modality::Rgb,
                };
            }
        }
        MissingKind::Prolonged => {
            let start = rng.gen_range(0..=len - n);
            let modality = coin_modality(&mut rng);
            for p in &mut pairs[start..start + n] {
                *p = drop_pair(modality);
            }
        }
    }
    Ok(MissingSchedule { kind, rate, seed, pairs })
}

/// Replaces the frames the schedule marks unavailable with zero frames, each
/// frame judged at its own timestamp. Returns the encoder input in layout order.
pub fn apply_schedule(sample: &CropSample, schedule: &MissingSchedule) -> Result<EncoderInput> {
    let frames = sample.frames();
    let mut out = Vec::with_capacity(frames.len());
    let mut availability = Vec::with_capacity(frames.len());
    for f in frames {
        if f.timestamp >= schedule.len() {
            return Err(Error::Contract(format!(
                "frame {} is beyond the {}-frame schedule",
                f.timestamp,
                schedule.len()
            )));
        }
        let avail = schedule.available(f.timestamp, f.modality);
        availability.push(avail);
        out.push(if avail {
            f
        } else {
            Frame::zeros(f.modality, f.height(), f.channels(), f.timestamp)
        });
    }
    Ok(EncoderInput { frames: out, availability })
}

pub const PRECISION_THRESHOLD_PX: f64 = 20.0;

/// `τ ∈ {0, 0.05, …, 1}`.
pub fn auc_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Contract(format!("{a} predictions for {b} ground-truth frames")))
    }
}

pub fn center_errors(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check_lengths(pred.len(), gt.len())?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p.cx - g.cx).hypot(p.cy - g.cy)).collect())
}

/// Fraction of frames with center error at most `threshold`.
pub fn precision_from_errors(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e <= threshold).count() as f64 / errors.len() as f64
}

pub fn precision_metric(pred: &[BBox], gt: &[BBox], threshold: f64) -> Result<f64> {
    Ok(precision_from_errors(&center_errors(pred, gt)?, threshold))
}

/// Mean over the 21 thresholds of the fraction of frames with IoU above each.
pub fn auc_from_ious(ious: &[f64]) -> f64 {
    auc_over_thresholds(ious, &auc_thresholds())
}

/// Mean over `th` of the fraction of frames with IoU above each threshold.
pub fn auc_over_thresholds(ious: &[f64], th: &[f64]) -> f64 {
    if ious.is_empty() || th.is_empty() {
        return 0.0;
    }
    let n = ious.len() as f64;
    th.iter()
        .map(|&tau| ious.iter().filter(|&&v| v > tau).count() as f64 / n)
        .sum::<f64>()
        / th.len() as f64
}

pub fn success_auc(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    check_lengths(pred.len(), gt.len())?;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    Ok(auc_from_ious(&ious))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub name: String,
    pub frames: usize,
    pub precision: f64,
    pub auc: f64,
    pub mean_iou: f64,
}

impl VideoMetrics {
    pub fn compute(name: impl Into<String>, pred: &[BBox], gt: &[BBox]) -> Result<Self> {
        let errors = center_errors(pred, gt)?;
        let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
        Ok(VideoMetrics {
            name: name.into(),
            frames: pred.len(),
            precision: precision_from_errors(&errors, PRECISION_THRESHOLD_PX),
            auc: auc_from_ious(&ious),
            mean_iou: ious.iter().sum::<f64>() / ious.len().max(1) as f64,
        })
    }
}

/// Which schedule family an evaluation used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: MissingKind,
    pub rate: f64,
    pub seed: u64,
}

impl ScheduleSpec {
    pub fn full() -> Self {
        ScheduleSpec {
            kind: MissingKind::Random,
            rate: 0.0,
            seed: 0,
        }
    }

    /// Schedule for video `index` of `len` frames.
    pub fn for_video(&self, index: usize, len: usize) -> Result<MissingSchedule> {
        make_schedule(self.kind, len, self.rate, rng::derive_seed(self.seed, "schedule", index as u64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision_at_20: f64,
    pub success_auc: f64,
    pub frames: usize,
    pub schedule: ScheduleSpec,
    pub videos: Vec<VideoMetrics>,
}

impl MetricsReport {
    /// Frame-weighted merge of per-video rows.
    pub fn from_videos(schedule: ScheduleSpec, videos: Vec<VideoMetrics>) -> Self {
        let frames: usize = videos.iter().map(|v| v.frames).sum();
        let avg = |f: fn(&VideoMetrics) -> f64| {
            if frames == 0 {
                0.0
            } else {
                videos.iter().map(|v| f(v) * v.frames as f64).sum::<f64>() / frames as f64
            }
        };
        MetricsReport {
            precision_at_20: avg(|v| v.precision),
            success_auc: avg(|v| v.auc),
            frames,
            schedule,
            videos,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("video,frames,precision,auc,mean_iou\n");
        for v in &self.videos {
            s += &format!("{},{},{},{},{}\n", v.name, v.frames, v.precision, v.auc, v.mean_iou);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
