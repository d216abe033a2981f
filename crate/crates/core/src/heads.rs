//! Prediction heads and the training objective.
//!
//! The head reads the search-region tokens of both modalities, averages the
//! available ones, and produces a center score map plus per-cell offset and
//! size. Training combines a focal classification loss, L1 and GIoU box losses,
//! and the routing auxiliaries (load balance and importance).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::hmoe::GateResult;
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::tokens::{Modality, SegmentKind, TokenSequence};

/// Gaussian width of the classification target, in cells.
pub const TARGET_SIGMA: f64 = 1.0;
pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;

/// Axis-aligned box as center and size. Ground truth and predictions use
/// coordinates normalized to the search region; metrics use pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// A GIoU value, with `degenerate` set when the union or the enclosing box
/// has zero area and the value is the `-1` convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Giou {
    pub value: f64,
    pub degenerate: bool,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_xyxy(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn to_xyxy(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Area measured on the `xyxy` corners, so that a box's intersection with
    /// itself equals its area exactly.
    pub fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.to_xyxy();
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    fn intersection(&self, other: &BBox) -> f64 {
        let a = self.to_xyxy();
        let b = other.to_xyxy();
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        iw * ih
    }

    /// Intersection over union; zero when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn giou(&self, other: &BBox) -> Giou {
        let a = self.to_xyxy();
        let b = other.to_xyxy();
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        let enclose = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
        if union <= 0.0 || enclose <= 0.0 {
            return Giou {
                value: -1.0,
                degenerate: true,
            };
        }
        Giou {
            value: inter / union - (enclose - union) / enclose,
            degenerate: false,
        }
    }
}

/// Head outputs over the `S×S` search grid, rows in row-major cell order.
#[derive(Clone, Copy, Debug)]
pub struct ScoreMap {
    pub side: usize,
    /// `S²×1` center logits.
    pub logits: Var,
    /// `S²×2` sub-cell offsets `(x, y)` in `(0, 1)`.
    pub offset: Var,
    /// `S²×2` normalized sizes `(w, h)` in `(0, 1)`.
    pub size: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    pub off_w: ParamId,
    pub off_b: ParamId,
    pub size_w: ParamId,
    pub size_b: ParamId,
}

impl HeadParams {
    pub fn new(config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let c = config.embed_dim;
        let std = (1.0 / c as f64).sqrt();
        Ok(HeadParams {
            cls_w: store.add("head.cls.w", init::normal_tensor(rng, &[c, 1], std))?,
            cls_b: store.add("head.cls.b", init::zeros(&[1]))?,
            off_w: store.add("head.offset.w", init::normal_tensor(rng, &[c, 2], std))?,
            off_b: store.add("head.offset.b", init::zeros(&[2]))?,
            size_w: store.add("head.size.w", init::normal_tensor(rng, &[c, 2], std))?,
            size_b: store.add("head.size.b", init::zeros(&[2]))?,
        })
    }
}

/// Search-region features: the mean of the available modality segments.
pub fn search_features(tape: &mut Tape, fused: &TokenSequence) -> Result<Var> {
    let mut parts = Vec::with_capacity(2);
    for m in Modality::BOTH {
        let seg = fused
            .layout
            .find(m, SegmentKind::Search)
            .ok_or_else(|| Error::Contract(format!("layout has no {m} search segment")))?;
        if fused.availability[seg.id] {
            parts.push(tape.slice_rows(fused.tokens, seg.start, seg.count)?);
        }
    }
    match parts[..] {
        [] => Err(Error::Contract("both search segments are unavailable".into())),
        [one] => Ok(one),
        [a, b] => {
            let s = tape.add(a, b)?;
            tape.scale(s, 0.5)
        }
        _ => unreachable!("two modalities"),
    }
}

pub fn heads_forward(tape: &mut Tape, store: &ParamStore, params: &HeadParams, fused: &TokenSequence) -> Result<ScoreMap> {
    let feat = search_features(tape, fused)?;
    let (cells, _) = tape.value(feat).dims2()?;
    let side = (cells as f64).sqrt().round() as usize;
    if side * side != cells {
        return Err(Error::Contract(format!("{cells} search tokens do not form a square grid")));
    }
    let linear = |tape: &mut Tape, w: ParamId, b: ParamId| -> Result<Var> {
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        let y = tape.matmul(feat, w)?;
        tape.add_row(y, b)
    };
    let logits = linear(tape, params.cls_w, params.cls_b)?;
    let offset = linear(tape, params.off_w, params.off_b)?;
    let offset = tape.sigmoid(offset)?;
    let size = linear(tape, params.size_w, params.size_b)?;
    let size = tape.sigmoid(size)?;
    Ok(ScoreMap {
        side,
        logits,
        offset,
        size,
    })
}

/// Row-major index of the largest logit, lowest index on ties.
pub fn peak_cell(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn decode_box(tape: &Tape, map: &ScoreMap) -> BBox {
    let logits = tape.value(map.logits).data();
    let off = tape.value(map.offset);
    let size = tape.value(map.size);
    let idx = peak_cell(logits);
    let s = map.side as f64;
    let (row, col) = (idx / map.side, idx % map.side);
    BBox {
        cx: (col as f64 + off.at(idx, 0)) / s,
        cy: (row as f64 + off.at(idx, 1)) / s,
        w: size.at(idx, 0),
        h: size.at(idx, 1),
    }
}

/// Grid cell `(row, col)` holding the center of a normalized box.
pub fn target_cell(gt: &BBox, side: usize) -> (usize, usize) {
    let cell = |v: f64| ((v * side as f64).floor().max(0.0) as usize).min(side - 1);
    (cell(gt.cy), cell(gt.cx))
}

/// Gaussian heatmap with peak 1 at the target cell.
pub fn gaussian_target(gt: &BBox, side: usize) -> Vec<f64> {
    let (r0, c0) = target_cell(gt, side);
    let mut y = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let d2 = (r as f64 - r0 as f64).powi(2) + (c as f64 - c0 as f64).powi(2);
            y.push((-d2 / (2.0 * TARGET_SIGMA * TARGET_SIGMA)).exp());
        }
    }
    y
}

/// Penalty-reduced focal loss against the Gaussian target, normalized by the
/// single positive cell.
///
/// `Σ_peak (1−p)^α·(−log p) + Σ_other (1−y)^β·p^α·(−log(1−p))` with
/// `p = σ(logit)`, `−log p = softplus(−logit)`, `−log(1−p) = softplus(logit)`.
pub fn cls_loss(tape: &mut Tape, map: &ScoreMap, gt: &BBox) -> Result<Var> {
    let n = map.side * map.side;
    let target = gaussian_target(gt, map.side);
    let (r0, c0) = target_cell(gt, map.side);
    let peak = r0 * map.side + c0;
    let mut w_pos = vec![0.0; n];
    w_pos[peak] = 1.0;
    let w_neg: Vec<f64> = target
        .iter()
        .enumerate()
        .map(|(i, &y)| if i == peak { 0.0 } else { (1.0 - y).powi(FOCAL_BETA) })
        .collect();

    let x = map.logits;
    let neg_x = tape.scale(x, -1.0)?;
    let one_minus_p = tape.sigmoid(neg_x)?;
    let neg_log_p = tape.softplus(neg_x)?;
    let p = tape.sigmoid(x)?;
    let neg_log_q = tape.softplus(x)?;

    let pos = power(tape, one_minus_p, FOCAL_ALPHA)?;
    let pos = tape.mul(pos, neg_log_p)?;
    let neg = power(tape, p, FOCAL_ALPHA)?;
    let neg = tape.mul(neg, neg_log_q)?;

    let w_pos = tape.constant(Tensor::new([n, 1], w_pos)?);
    let w_neg = tape.constant(Tensor::new([n, 1], w_neg)?);
    let pos = tape.mul(pos, w_pos)?;
    let neg = tape.mul(neg, w_neg)?;
    let all = tape.add(pos, neg)?;
    tape.sum(all)
}

fn power(tape: &mut Tape, x: Var, k: i32) -> Result<Var> {
    let mut y = x;
    for _ in 1..k {
        y = tape.mul(y, x)?;
    }
    Ok(y)
}

/// The predicted box at the ground-truth cell, `1×4` in `cxcywh`.
pub fn box_at_target(tape: &mut Tape, map: &ScoreMap, gt: &BBox) -> Result<Var> {
    let (r0, c0) = target_cell(gt, map.side);
    let idx = r0 * map.side + c0;
    let s = map.side as f64;
    let off = tape.slice_rows(map.offset, idx, 1)?;
    let off = tape.scale(off, 1.0 / s)?;
    let base = tape.constant(Tensor::new([1, 2], vec![c0 as f64 / s, r0 as f64 / s])?);
    let center = tape.add(off, base)?;
    let size = tape.slice_rows(map.size, idx, 1)?;
    tape.concat_cols(&[center, size])
}

/// Mean absolute error over the four box coordinates.
pub fn l1_loss(tape: &mut Tape, pred: Var, gt: &BBox) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    let target = tape.constant(Tensor::new(shape, gt.to_array().to_vec())?);
    let d = tape.sub(pred, target)?;
    let d = tape.abs(d)?;
    let s = tape.sum(d)?;
    tape.scale(s, 0.25)
}

pub fn giou_loss(tape: &mut Tape, pred: Var, gt: &BBox) -> Result<Var> {
    tape.giou_loss(pred, gt.to_array())
}

fn check_batch(gates: &[GateResult]) -> Result<usize> {
    let m = gates
        .first()
        .ok_or_else(|| Error::Contract("auxiliary losses need a non-empty batch".into()))?
        .probs
        .len();
    if gates.iter().any(|g| g.probs.len() != m) {
        return Err(Error::Contract("gate results disagree on the number of experts".into()));
    }
    Ok(m)
}

fn sum_probs(tape: &mut Tape, gates: &[GateResult]) -> Result<Var> {
    let mut acc = gates[0].probs_var;
    for g in &gates[1..] {
        acc = tape.add(acc, g.probs_var)?;
    }
    Ok(acc)
}

/// `CV²` of the per-expert summed probabilities (population variance over
/// squared mean).
pub fn importance_loss(tape: &mut Tape, gates: &[GateResult]) -> Result<Var> {
    let m = check_batch(gates)?;
    let imp = sum_probs(tape, gates)?;
    let total = tape.sum(imp)?;
    let mean = tape.scale(total, 1.0 / m as f64)?;
    let neg_mean = tape.scale(mean, -1.0)?;
    let centered = tape.add_scalar(imp, neg_mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.sum(sq)?;
    let var = tape.scale(var, 1.0 / m as f64)?;
    let mean_sq = tape.mul(mean, mean)?;
    tape.div(var, mean_sq)
}

/// Fraction of the `(item, slot)` selections that went to each expert.
pub fn selection_fractions(gates: &[GateResult], m: usize) -> Vec<f64> {
    let mut f = vec![0.0; m];
    let mut slots = 0usize;
    for g in gates {
        for &n in &g.selected {
            f[n] += 1.0;
            slots += 1;
        }
    }
    f.iter_mut().for_each(|v| *v /= slots.max(1) as f64);
    f
}

/// `M · Σ f_n P_n` with `f` from top-K slot counts and `P` the mean softmax
/// probabilities.
pub fn balance_loss(tape: &mut Tape, gates: &[GateResult]) -> Result<Var> {
    let m = check_batch(gates)?;
    let f = tape.constant(Tensor::new([1, m], selection_fractions(gates, m))?);
    let p = sum_probs(tape, gates)?;
    let p = tape.scale(p, 1.0 / gates.len() as f64)?;
    let fp = tape.mul(f, p)?;
    let s = tape.sum(fp)?;
    tape.scale(s, m as f64)
}

/// `(λ1, λ2, λ3, λ4)` for aux, classification, L1 and GIoU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub aux: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            aux: 1.0,
            cls: 5.0,
            l1: 2.0,
            giou: 1.0,
        }
    }
}

/// Scalar loss terms on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub l1: Var,
    pub giou: Var,
    pub balance: Var,
    pub importance: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub balance: f64,
    pub importance: f64,
    pub aux: f64,
    pub total: f64,
}

/// `λ1·aux + λ2·cls + λ3·l1 + λ4·giou`, summed in that order.
pub fn weighted_total(aux: f64, cls: f64, l1: f64, giou: f64, w: &LossWeights) -> f64 {
    w.aux * aux + w.cls * cls + w.l1 * l1 + w.giou * giou
}

impl LossBreakdown {
    pub fn from_parts(cls: f64, l1: f64, giou: f64, balance: f64, importance: f64, w: &LossWeights) -> Self {
        let aux = balance + importance;
        LossBreakdown {
            cls,
            l1,
            giou,
            balance,
            importance,
            aux,
            total: weighted_total(aux, cls, l1, giou, w),
        }
    }
}

/// Combines the terms on the tape and reports their values.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let aux = tape.add(terms.balance, terms.importance)?;
    let parts = [(aux, w.aux), (terms.cls, w.cls), (terms.l1, w.l1), (terms.giou, w.giou)];
    let mut total = tape.scale(parts[0].0, parts[0].1)?;
    for &(v, lambda) in &parts[1..] {
        let t = tape.scale(v, lambda)?;
        total = tape.add(total, t)?;
    }
    let val = |v: Var| tape.scalar_value(v);
    let breakdown = LossBreakdown {
        cls: val(terms.cls),
        l1: val(terms.l1),
        giou: val(terms.giou),
        balance: val(terms.balance),
        importance: val(terms.importance),
        aux: val(aux),
        total: val(total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_gradient, relative_error};
    use crate::hmoe::gate_from_logits;
    use crate::rng;
    use crate::tokens::assemble_layout;
    use std::sync::Arc;

    fn map_from(tape: &mut Tape, side: usize, logits: Vec<f64>, off: Vec<f64>, size: Vec<f64>) -> ScoreMap {
        let n = side * side;
        ScoreMap {
            side,
            logits: tape.constant(Tensor::new([n, 1], logits).unwrap()),
            offset: tape.constant(Tensor::new([n, 2], off).unwrap()),
            size: tape.constant(Tensor::new([n, 2], size).unwrap()),
        }
    }

    #[test]
    fn giou_hand_cases() {
        let a = BBox::from_xyxy(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_xyxy(1.0, 1.0, 3.0, 3.0);
        assert!((a.giou(&a).value - 1.0).abs() < 1e-12);
        let g = a.giou(&b).value;
        assert!((g - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-12);
        assert!((g + 0.0794).abs() < 1e-4);
        assert!((a.giou(&b).value - b.giou(&a).value).abs() < 1e-15);
        let far = BBox::from_xyxy(1000.0, 1000.0, 1001.0, 1001.0);
        let unit = BBox::from_xyxy(0.0, 0.0, 1.0, 1.0);
        assert!(unit.giou(&far).value < -0.99);
        let z = BBox::new(0.5, 0.5, 0.0, 0.0);
        let gz = z.giou(&z);
        assert!(gz.degenerate && gz.value == -1.0);
    }

    #[test]
    fn giou_bounded_by_iou() {
        let mut r = rng::stream(3, "boxes");
        for _ in 0..1000 {
            let mut b = || BBox::new(r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.01..0.5), r.gen_range(0.01..0.5));
            let (a, c) = (b(), b());
            assert!(a.giou(&c).value <= a.iou(&c) + 1e-15);
        }
        // union fills the enclosing box: side-by-side boxes
        let a = BBox::from_xyxy(0.0, 0.0, 1.0, 1.0);
        let c = BBox::from_xyxy(0.5, 0.0, 1.5, 1.0);
        assert!((a.giou(&c).value - a.iou(&c)).abs() < 1e-15);
    }

    #[test]
    fn decode_hot_cell() {
        let mut tape = Tape::new();
        let mut logits = vec![0.0; 64];
        logits[3 * 8 + 4] = 5.0;
        let map = map_from(&mut tape, 8, logits, vec![0.5; 128], vec![0.25; 128]);
        let b = decode_box(&tape, &map);
        assert!((b.cx - 0.5625).abs() < 1e-15 && (b.cy - 0.4375).abs() < 1e-15);
        assert_eq!((b.w, b.h), (0.25, 0.25));
        assert_eq!(target_cell(&b, 8), (3, 4));

        let map = map_from(&mut tape, 8, vec![1.0; 64], vec![0.0; 128], vec![0.1; 128]);
        let b = decode_box(&tape, &map);
        assert_eq!((b.cx, b.cy), (0.0, 0.0));
    }

    fn fused_seq(tape: &mut Tape, c: usize, seed: u64) -> TokenSequence {
        let layout = Arc::new(assemble_layout(1, 16, 4).unwrap());
        let l = layout.total();
        let mut r = rng::stream(seed, "fused");
        let data = (0..l * c).map(|_| r.gen_range(-1.0..1.0)).collect();
        TokenSequence {
            tokens: tape.constant(Tensor::new([l, c], data).unwrap()),
            availability: vec![true; layout.len()],
            layout,
        }
    }

    fn small_heads(seed: u64) -> (ParamStore, HeadParams) {
        let config = ModelConfig {
            embed_dim: 6,
            heads: 2,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let p = HeadParams::new(&config, &mut store, &mut rng::stream(seed, "heads")).unwrap();
        (store, p)
    }

    #[test]
    fn zero_inputs_give_flat_map() {
        let (mut store, p) = small_heads(0);
        for id in store.ids() {
            let shape = store.get(id).tensor().shape().to_vec();
            *store.get_mut(id).tensor_mut() = Tensor::zeros(shape);
        }
        let mut tape = Tape::new();
        let mut seq = fused_seq(&mut tape, 6, 0);
        seq.tokens = tape.constant(Tensor::zeros([40, 6]));
        let map = heads_forward(&mut tape, &store, &p, &seq).unwrap();
        assert_eq!(map.side, 4);
        let l = tape.value(map.logits).data();
        assert!(l.iter().all(|&v| v == l[0]));
        assert!(tape.value(map.offset).data().iter().all(|&v| v == 0.5));
        assert!(tape.value(map.size).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn unavailable_x_search_is_ignored() {
        let (store, p) = small_heads(1);
        let mut tape = Tape::new();
        let mut seq = fused_seq(&mut tape, 6, 1);
        let x_id = seq.layout.index_of(Modality::X, SegmentKind::Search).unwrap();
        seq.availability[x_id] = false;
        let a = heads_forward(&mut tape, &store, &p, &seq).unwrap();
        let a = tape.value(a.logits).clone();

        let mut t = tape.value(seq.tokens).clone();
        let x_seg = seq.layout.segments()[x_id].clone();
        for r in x_seg.rows() {
            for c in 0..6 {
                t.data_mut()[r * 6 + c] += 3.0;
            }
        }
        seq.tokens = tape.constant(t);
        let b = heads_forward(&mut tape, &store, &p, &seq).unwrap();
        assert_eq!(tape.value(b.logits).data(), a.data());

        let rgb_id = seq.layout.index_of(Modality::Rgb, SegmentKind::Search).unwrap();
        seq.availability[rgb_id] = false;
        assert!(matches!(heads_forward(&mut tape, &store, &p, &seq), Err(Error::Contract(_))));
    }

    #[test]
    fn default_config_gives_eight_by_eight_map() {
        let config = ModelConfig::default();
        assert_eq!(config.search_tokens(), 64);
        assert_eq!(config.score_side(), 8);
    }

    /// Plain-loop focal loss in terms of `p = σ(x)`.
    fn focal_oracle(logits: &[f64], gt: &BBox, side: usize) -> f64 {
        let (r0, c0) = target_cell(gt, side);
        let mut loss = 0.0;
        for r in 0..side {
            for c in 0..side {
                let x = logits[r * side + c];
                let p = 1.0 / (1.0 + (-x).exp());
                if (r, c) == (r0, c0) {
                    loss -= (1.0 - p).powi(2) * p.ln();
                } else {
                    let d2 = (r as f64 - r0 as f64).powi(2) + (c as f64 - c0 as f64).powi(2);
                    let y = (-d2 / 2.0).exp();
                    loss -= (1.0 - y).powi(4) * p.powi(2) * (1.0 - p).ln();
                }
            }
        }
        loss
    }

    #[test]
    fn cls_loss_matches_loop_oracle() {
        let gt = BBox::new(0.3, 0.7, 0.2, 0.2);
        let mut tape = Tape::new();
        let map = map_from(&mut tape, 8, vec![0.0; 64], vec![0.5; 128], vec![0.5; 128]);
        let l = cls_loss(&mut tape, &map, &gt).unwrap();
        assert!((tape.scalar_value(l) - focal_oracle(&[0.0; 64], &gt, 8)).abs() < 1e-12);

        let mut r = rng::stream(5, "logits");
        let logits: Vec<f64> = (0..64).map(|_| r.gen_range(-4.0..4.0)).collect();
        let map = map_from(&mut tape, 8, logits.clone(), vec![0.5; 128], vec![0.5; 128]);
        let l = cls_loss(&mut tape, &map, &gt).unwrap();
        assert!((tape.scalar_value(l) - focal_oracle(&logits, &gt, 8)).abs() < 1e-12);
        assert!(tape.scalar_value(l) > 0.0);
    }

    #[test]
    fn cls_loss_vanishes_for_perfect_map() {
        let gt = BBox::new(0.55, 0.45, 0.2, 0.2);
        let (r0, c0) = target_cell(&gt, 8);
        let mut logits = vec![-60.0; 64];
        logits[r0 * 8 + c0] = 60.0;
        let mut tape = Tape::new();
        let map = map_from(&mut tape, 8, logits, vec![0.5; 128], vec![0.5; 128]);
        let l = cls_loss(&mut tape, &map, &gt).unwrap();
        assert!(tape.scalar_value(l) < 1e-20);
    }

    #[test]
    fn cls_loss_gradient_matches_finite_differences() {
        let gt = BBox::new(0.4, 0.6, 0.2, 0.3);
        for seed in 0..5 {
            let mut r = rng::stream(seed, "logits");
            let x0 = Tensor::new([16, 1], (0..16).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
            let f = |t: &Tensor| {
                let mut tape = Tape::new();
                let map = map_from(&mut tape, 4, t.data().to_vec(), vec![0.5; 32], vec![0.5; 32]);
                let l = cls_loss(&mut tape, &map, &gt).unwrap();
                tape.scalar_value(l)
            };
            let mut tape = Tape::new();
            let x = tape.input(x0.clone());
            let map = ScoreMap {
                side: 4,
                logits: x,
                offset: tape.constant(Tensor::full([16, 2], 0.5)),
                size: tape.constant(Tensor::full([16, 2], 0.5)),
            };
            let l = cls_loss(&mut tape, &map, &gt).unwrap();
            let g = tape.backward(l).unwrap();
            let numeric = finite_difference_gradient(f, &x0, 1e-5);
            assert!(relative_error(g.wrt(x).unwrap(), numeric.data()) < 1e-6);
        }
    }

    #[test]
    fn l1_matches_loop() {
        let gt = BBox::new(0.5, 0.4, 0.2, 0.1);
        let pred = [0.45, 0.5, 0.3, 0.05];
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new([1, 4], pred.to_vec()).unwrap());
        let l = l1_loss(&mut tape, p, &gt).unwrap();
        let expect: f64 = pred.iter().zip(gt.to_array()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0;
        assert!((tape.scalar_value(l) - expect).abs() < 1e-15);
    }

    #[test]
    fn box_at_target_reads_gt_cell() {
        let gt = BBox::new(0.3, 0.6, 0.2, 0.2);
        let mut tape = Tape::new();
        let mut off = vec![0.0; 128];
        let mut size = vec![0.0; 128];
        let (r0, c0) = target_cell(&gt, 8);
        let idx = r0 * 8 + c0;
        off[2 * idx] = 0.25;
        off[2 * idx + 1] = 0.75;
        size[2 * idx] = 0.3;
        size[2 * idx + 1] = 0.4;
        let map = map_from(&mut tape, 8, vec![0.0; 64], off, size);
        let b = box_at_target(&mut tape, &map, &gt).unwrap();
        let v = tape.value(b).data();
        assert_eq!((r0, c0), (4, 2));
        assert!((v[0] - 2.25 / 8.0).abs() < 1e-15 && (v[1] - 4.75 / 8.0).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.3, 0.4]);
    }

    fn gates_from(tape: &mut Tape, rows: &[Vec<f64>], k: usize) -> Vec<GateResult> {
        rows.iter()
            .map(|l| {
                let v = tape.constant(Tensor::new([1, l.len()], l.clone()).unwrap());
                gate_from_logits(tape, v, k, false).unwrap()
            })
            .collect()
    }

    #[test]
    fn importance_hand_cases() {
        let mut tape = Tape::new();
        let gates = gates_from(&mut tape, &[vec![0.0; 4], vec![0.0; 4]], 2);
        let l = importance_loss(&mut tape, &gates).unwrap();
        assert!(tape.scalar_value(l).abs() < 1e-12);

        // importances [2, 0]: two items putting (almost) all mass on expert 0
        let gates = gates_from(&mut tape, &[vec![800.0, 0.0], vec![800.0, 0.0]], 1);
        let l = importance_loss(&mut tape, &gates).unwrap();
        assert!((tape.scalar_value(l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn importance_is_scale_free() {
        let mut r = rng::stream(8, "imp");
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
        let mut tape = Tape::new();
        let g = gates_from(&mut tape, &rows, 2);
        let single = importance_loss(&mut tape, &g).unwrap();
        let mut doubled = g.clone();
        doubled.extend(g.iter().cloned());
        let double = importance_loss(&mut tape, &doubled).unwrap();
        assert!((tape.scalar_value(single) - tape.scalar_value(double)).abs() < 1e-12);
    }

    #[test]
    fn balance_hand_cases() {
        let mut tape = Tape::new();
        // four items, each selecting a different pair so every expert gets 2 of 8 slots
        let rows = vec![
            vec![1e-9, 1e-9, 0.0, 0.0],
            vec![0.0, 0.0, 1e-9, 1e-9],
            vec![1e-9, 0.0, 1e-9, 0.0],
            vec![0.0, 1e-9, 0.0, 1e-9],
        ];
        let g = gates_from(&mut tape, &rows, 2);
        // probs are uniform to ~1e-9; use exact uniform probs for the anchor
        let exact: Vec<GateResult> = g
            .into_iter()
            .map(|mut gr| {
                gr.probs = vec![0.25; 4];
                gr.probs_var = tape.constant(Tensor::full([1, 4], 0.25));
                gr
            })
            .collect();
        let l = balance_loss(&mut tape, &exact).unwrap();
        assert!((tape.scalar_value(l) - 1.0).abs() < 1e-12);

        let mut one = gates_from(&mut tape, &[vec![1.0, 0.0, 0.0]], 1);
        one[0].probs_var = tape.constant(Tensor::new([1, 3], vec![1.0, 0.0, 0.0]).unwrap());
        let l = balance_loss(&mut tape, &one).unwrap();
        assert!((tape.scalar_value(l) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn balance_matches_loop_and_is_at_least_one() {
        let mut r = rng::stream(9, "bal");
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..6).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
            let mut tape = Tape::new();
            let g = gates_from(&mut tape, &rows, 2);
            let l = balance_loss(&mut tape, &g).unwrap();
            let m = 6;
            let mut f = vec![0.0; m];
            let mut p = vec![0.0; m];
            for gr in &g {
                for &n in &gr.selected {
                    f[n] += 1.0 / 16.0;
                }
                for n in 0..m {
                    p[n] += gr.probs[n] / 8.0;
                }
            }
            let oracle: f64 = m as f64 * (0..m).map(|n| f[n] * p[n]).sum::<f64>();
            assert!((tape.scalar_value(l) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_composition() {
        let mut tape = Tape::new();
        let c = |tape: &mut Tape, v| tape.constant(Tensor::scalar(v));
        let terms = LossTerms {
            cls: c(&mut tape, 0.2),
            l1: c(&mut tape, 0.3),
            giou: c(&mut tape, 0.4),
            balance: c(&mut tape, 0.1),
            importance: c(&mut tape, 0.0),
        };
        let (_, b) = total_loss(&mut tape, &terms, &LossWeights::default()).unwrap();
        assert_eq!(b.total, 2.1);
        assert_eq!(b.aux, b.balance + b.importance);
        assert_eq!(weighted_total(0.1, 0.2, 0.3, 0.4, &LossWeights::default()), 2.1);

        let cls_only = LossWeights {
            aux: 0.0,
            cls: 1.0,
            l1: 0.0,
            giou: 0.0,
        };
        let (_, b) = total_loss(&mut tape, &terms, &cls_only).unwrap();
        assert_eq!(b.total, b.cls);
        assert_eq!(LossBreakdown::from_parts(0.0, 0.0, 0.0, 0.0, 0.0, &LossWeights::default()).total, 0.0);
    }
}
