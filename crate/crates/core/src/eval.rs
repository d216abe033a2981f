//! Frame-by-frame tracking under a missing-modality schedule.
//!
//! The first `N` frames are initialized with ground truth. From frame `N`
//! on, the search region at `t` is cropped around the prediction at `t − 1`
//! and each clip frame around its own earlier prediction. No masking runs
//! here; only the schedule removes modalities.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::heads::{decode_box, BBox};
use crate::missing::{apply_schedule, MetricsReport, MissingSchedule, ScheduleSpec, VideoMetrics};
use crate::model::TrackerModel;
use crate::params::ParamStore;
use crate::routing::RoutingRecord;
use crate::synth::{crop_with_refs, CropConfig, RenderedSequence};
use crate::tokens::EncoderInput;

/// Keeps a predicted box inside the frame with at least a 2-pixel side.
pub fn sanitize_box(b: &BBox, frame_size: usize) -> BBox {
    let f = frame_size as f64;
    let w = if b.w.is_finite() { b.w.clamp(2.0, f) } else { 2.0 };
    let h = if b.h.is_finite() { b.h.clamp(2.0, f) } else { 2.0 };
    let cx = if b.cx.is_finite() { b.cx.clamp(0.0, f) } else { f / 2.0 };
    let cy = if b.cy.is_finite() { b.cy.clamp(0.0, f) } else { f / 2.0 };
    BBox::new(cx, cy, w, h)
}

pub fn video_name(index: usize) -> String {
    format!("video_{index:04}")
}

/// Runs `predict(t, history, schedule)` for `t = n_clips..T` on each video,
/// where `history[k]` is the box at frame `k` (ground truth for `k < n_clips`,
/// earlier predictions after), and scores the predictions on frames `n_clips..T`.
pub fn run_tracker<F>(videos: &[RenderedSequence], n_clips: usize, spec: &ScheduleSpec, mut predict: F) -> Result<MetricsReport>
where
    F: FnMut(usize, &RenderedSequence, usize, &[BBox], &MissingSchedule) -> Result<BBox>,
{
    let mut rows = Vec::with_capacity(videos.len());
    for (vi, video) in videos.iter().enumerate() {
        if video.len() <= n_clips {
            return Err(Error::Validation(format!(
                "{} has {} frames, needs more than {n_clips}",
                video_name(vi),
                video.len()
            )));
        }
        let schedule = spec.for_video(vi, video.len())?;
        let mut history: Vec<BBox> = video.gt[..n_clips].to_vec();
        for t in n_clips..video.len() {
            let b = predict(vi, video, t, &history, &schedule)?;
            history.push(sanitize_box(&b, video.spec.frame_size));
        }
        rows.push(VideoMetrics::compute(video_name(vi), &history[n_clips..], &video.gt[n_clips..])?);
    }
    Ok(MetricsReport::from_videos(*spec, rows))
}

/// Evaluates a trained model. Returns the metrics and one routing record per
/// frame and fusion layer.
pub fn evaluate(
    model: &TrackerModel,
    store: &ParamStore,
    videos: &[RenderedSequence],
    crop: &CropConfig,
    spec: &ScheduleSpec,
) -> Result<(MetricsReport, Vec<RoutingRecord>)> {
    let n = crop.n_clips;
    if n != model.config().n_clips {
        return Err(Error::Config(format!(
            "crop uses {n} clips but the model was built for {}",
            model.config().n_clips
        )));
    }
    let mut telemetry = Vec::new();
    let report = run_tracker(videos, n, spec, |vi, video, t, history, schedule| {
        let sample = crop_with_refs(video, t, crop, &history[t - n..t], &history[t - 1])?;
        let input: EncoderInput = apply_schedule(&sample, schedule)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, &input)?;
        let rate = model.layout().missing_rate(&input.availability);
        for (layer, g) in out.gates.iter().enumerate() {
            let widths = model.fuse_layers()[layer].widths();
            telemetry.push(RoutingRecord {
                source: video_name(vi),
                index: t,
                layer,
                missing_rate: rate,
                selected: g.selected.clone(),
                widths: g.selected.iter().map(|&e| widths[e]).collect(),
            });
        }
        let local = decode_box(&tape, &out.map);
        Ok(sample.search_crop.to_frame(&local))
    })?;
    Ok((report, telemetry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::missing::MissingKind;
    use crate::synth::{generate_videos, Corruption, SceneSpec};

    #[test]
    fn oracle_tracker_is_perfect() {
        let videos = generate_videos(&SceneSpec::default(), 3, 1).unwrap();
        let spec = ScheduleSpec {
            kind: MissingKind::Random,
            rate: 0.5,
            seed: 2,
        };
        let r = run_tracker(&videos, 3, &spec, |_, v, t, _, _| Ok(v.gt[t])).unwrap();
        assert_eq!(r.precision_at_20, 1.0);
        assert!((r.success_auc - 20.0 / 21.0).abs() < 1e-12);
        assert_eq!(r.frames, 3 * 57);
    }

    #[test]
    fn fixed_center_on_static_scene() {
        let spec = SceneSpec {
            speed_min: 0.0,
            speed_max: 0.0,
            corruption: Corruption::None,
            ..SceneSpec::default()
        };
        let videos = generate_videos(&spec, 2, 4).unwrap();
        let r = run_tracker(&videos, 3, &ScheduleSpec::full(), |_, v, _, _, _| Ok(v.gt[0])).unwrap();
        assert_eq!(r.precision_at_20, 1.0);
    }

    #[test]
    fn sanitize_keeps_boxes_in_frame() {
        let b = sanitize_box(&BBox::new(-5.0, f64::NAN, 0.0, 900.0), 64);
        assert_eq!(b, BBox::new(0.0, 32.0, 2.0, 64.0));
    }
}
