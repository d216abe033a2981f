use proptest::prelude::*;

use mmtrack::heads::BBox;
use mmtrack::hmoe::top_k;
use mmtrack::masking::{sample_mask_decision, MaskSampler};
use mmtrack::missing::{auc_from_ious, make_schedule, precision_from_errors, MissingKind};
use mmtrack::synth::Crop;
use mmtrack::tokens::{assemble_layout, Modality, SegmentKind};

fn kind() -> impl Strategy<Value = MissingKind> {
    prop_oneof![Just(MissingKind::Random), Just(MissingKind::Switched), Just(MissingKind::Prolonged)]
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..64.0f64, 0.0..64.0f64, 0.5..30.0f64, 0.5..30.0f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

proptest! {
    #[test]
    fn layout_tiles_the_sequence(n in 1usize..6, s in 1usize..20, c in 1usize..10) {
        let layout = assemble_layout(n, s, c).unwrap();
        prop_assert_eq!(layout.total(), 2 * s + 2 * n * c);
        prop_assert_eq!(layout.len(), 2 + 2 * n);
        let mut next = 0;
        for seg in layout.segments() {
            prop_assert_eq!(seg.start, next);
            next += seg.count;
        }
        prop_assert_eq!(next, layout.total());
        for m in Modality::BOTH {
            prop_assert!(layout.find(m, SegmentKind::Search).is_some());
            for i in 1..=n {
                prop_assert!(layout.find(m, SegmentKind::Clip(i)).is_some());
            }
        }
    }

    #[test]
    fn schedules_never_drop_both(kind in kind(), len in 1usize..200, rate in 0.0..0.99f64, seed in any::<u64>()) {
        let s = make_schedule(kind, len, rate, seed).unwrap();
        prop_assert_eq!(s.len(), len);
        prop_assert_eq!(s.both_missing(), 0);
        prop_assert_eq!(s.affected(), (rate * len as f64).floor() as usize);
        prop_assert_eq!(s, make_schedule(kind, len, rate, seed).unwrap());
    }

    #[test]
    fn prolonged_is_one_run_of_one_modality(len in 1usize..200, rate in 0.01..0.99f64, seed in any::<u64>()) {
        let s = make_schedule(MissingKind::Prolonged, len, rate, seed).unwrap();
        let hit: Vec<usize> = (0..len).filter(|&t| s.pairs[t] != [1, 1]).collect();
        if let (Some(&a), Some(&b)) = (hit.first(), hit.last()) {
            prop_assert_eq!(b - a + 1, hit.len());
            prop_assert!(hit.iter().all(|&t| s.pairs[t] == s.pairs[a]));
        }
    }

    #[test]
    fn mask_decisions_keep_a_modality(seed in any::<u64>(), n in 1usize..6, alpha in 0.0..=1.0f64) {
        let mut sampler = MaskSampler::new(seed);
        for _ in 0..50 {
            let d = sample_mask_decision(&mut sampler, n, alpha).unwrap();
            prop_assert!(d.search != [false, false]);
            if let Some(clips) = &d.clips {
                prop_assert_eq!(clips.len(), n);
                prop_assert!(clips.iter().all(|c| *c != [false, false]));
            }
        }
    }

    #[test]
    fn giou_bounds_and_symmetry(a in bbox(), b in bbox()) {
        let ab = a.giou(&b).value;
        let ba = b.giou(&a).value;
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
        let iou = a.iou(&b);
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert!(ab <= iou + 1e-12);
        prop_assert!((a.giou(&a).value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn precision_is_monotone(errors in prop::collection::vec(0.0..60.0f64, 1..50), idx in any::<prop::sample::Index>(), cut in 0.0..1.0f64) {
        let before = precision_from_errors(&errors, 20.0);
        let mut better = errors.clone();
        let i = idx.index(better.len());
        better[i] *= cut;
        prop_assert!(precision_from_errors(&better, 20.0) >= before);
    }

    #[test]
    fn auc_is_monotone_and_bounded(ious in prop::collection::vec(0.0..=1.0f64, 1..50), lift in 0.0..0.5f64) {
        let a = auc_from_ious(&ious);
        let lifted: Vec<f64> = ious.iter().map(|v| (v + lift).min(1.0)).collect();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(auc_from_ious(&lifted) >= a);
    }

    #[test]
    fn top_k_picks_largest(logits in prop::collection::vec(-5.0..5.0f64, 1..12), k in 1usize..12) {
        let k = k.min(logits.len());
        let sel = top_k(&logits, k);
        prop_assert_eq!(sel.len(), k);
        let min_sel = sel.iter().map(|&i| logits[i]).fold(f64::INFINITY, f64::min);
        for (i, &v) in logits.iter().enumerate() {
            if !sel.contains(&i) {
                prop_assert!(v <= min_sel);
            }
        }
        prop_assert!(sel.windows(2).all(|w| logits[w[0]] >= logits[w[1]]));
    }

    #[test]
    fn crop_round_trip(reference in bbox(), target in bbox(), context in 1.0..4.0f64) {
        let crop = Crop::around(&reference, context, 64);
        let back = crop.to_frame(&crop.to_normalized(&target));
        prop_assert!((back.cx - target.cx).abs() < 1e-9);
        prop_assert!((back.cy - target.cy).abs() < 1e-9);
        prop_assert!((back.w - target.w).abs() < 1e-9);
        prop_assert!((back.h - target.h).abs() < 1e-9);
    }
}
