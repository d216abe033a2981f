//! Heterogeneous mixture-of-experts fusion.
//!
//! One routing decision is made per token sequence: the rows are mean-pooled,
//! projected to one logit per expert, and the `K` largest logits select the
//! active experts. Their gate values are the full softmax probabilities at those
//! indices, not renormalized. Only selected experts are evaluated.
//!
//! The fused output is
//!
//! ```text
//! T_y1 = Σ g_n · E_n(T_v)                      (L×C)
//! T_y2 = (T_v·W1)(T_v·W2)ᵀ                      (L×L)
//! T_y3 = T_y2ᵀ · T_y1                           (L×C)
//! T_y4 = row_softmax(T_v·W3) · T_y3             (L×C)
//! T_y5 = T_y4 · W4                              (L×C)
//! out  = T_v + T_y5
//! ```
//!
//! `W3` is `C×L`, so the layer is tied to a fixed sequence length.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParamStore};
use crate::tokens::TokenSequence;

const FUSE_INIT_STD: f64 = 0.02;

/// Indices of the `k` largest values, highest first; ties go to the lower index.
pub fn top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug)]
pub struct GateResult {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Selected expert indices, in descending logit order.
    pub selected: Vec<usize>,
    /// Gate value per expert; zero off the selection.
    pub gates: Vec<f64>,
    /// `1×M` softmax probabilities on the tape, for the auxiliary losses.
    pub probs_var: Var,
    /// Gate values of the selected experts on the tape, aligned with `selected`.
    pub gate_vars: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertParams {
    pub width: usize,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionWeights {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub w4: ParamId,
    pub gate: ParamId,
}

/// One fusion layer: gate, expert bank, and the linear-attention chain.
pub struct HmoeFuse {
    top_k: usize,
    renormalize: bool,
    seq_len: usize,
    experts: Vec<ExpertParams>,
    weights: FusionWeights,
    evaluations: Vec<AtomicUsize>,
}

impl HmoeFuse {
    pub fn new(
        config: &ModelConfig,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let l = config.seq_len();
        let m = config.num_experts();
        let mut experts = Vec::with_capacity(m);
        for (n, &h) in config.expert_widths.iter().enumerate() {
            let name = |s: &str| format!("{prefix}.expert{n}.{s}");
            experts.push(ExpertParams {
                width: h,
                w_in: store.add(name("w_in"), init::normal_tensor(rng, &[c, h], (1.0 / c as f64).sqrt()))?,
                b_in: store.add(name("b_in"), init::zeros(&[h]))?,
                w_out: store.add(name("w_out"), init::normal_tensor(rng, &[h, c], (1.0 / h as f64).sqrt()))?,
                b_out: store.add(name("b_out"), init::zeros(&[c]))?,
            });
        }
        let name = |s: &str| format!("{prefix}.{s}");
        let weights = FusionWeights {
            w1: store.add(name("w1"), init::normal_tensor(rng, &[c, c], FUSE_INIT_STD))?,
            w2: store.add(name("w2"), init::normal_tensor(rng, &[c, c], FUSE_INIT_STD))?,
            w3: store.add(name("w3"), init::normal_tensor(rng, &[c, l], FUSE_INIT_STD))?,
            w4: store.add(name("w4"), init::normal_tensor(rng, &[c, c], FUSE_INIT_STD))?,
            gate: store.add(name("gate"), init::normal_tensor(rng, &[c, m], 0.1))?,
        };
        Ok(HmoeFuse {
            top_k: config.top_k,
            renormalize: config.renormalize_gates,
            seq_len: l,
            experts,
            weights,
            evaluations: (0..m).map(|_| AtomicUsize::new(0)).collect(),
        })
    }

    pub fn experts(&self) -> &[ExpertParams] {
        &self.experts
    }

    pub fn weights(&self) -> &FusionWeights {
        &self.weights
    }

    pub fn widths(&self) -> Vec<usize> {
        self.experts.iter().map(|e| e.width).collect()
    }

    /// How many times each expert has been evaluated since the last reset.
    pub fn evaluation_counts(&self) -> Vec<usize> {
        self.evaluations.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset_evaluation_counts(&self) {
        self.evaluations.iter().for_each(|c| c.store(0, Ordering::Relaxed));
    }

    /// Clip-level routing over the mean of all `L` rows (zeroed rows included).
    pub fn gate(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Result<GateResult> {
        let pooled = tape.mean_rows(tokens)?;
        let wg = tape.param(store, self.weights.gate);
        let logits_var = tape.matmul(pooled, wg)?;
        gate_from_logits(tape, logits_var, self.top_k, self.renormalize)
    }

    /// `E_n(x) = GELU(x·W_in + b_in)·W_out + b_out`.
    pub fn expert_forward(&self, tape: &mut Tape, store: &ParamStore, n: usize, x: Var) -> Result<Var> {
        let e = self.experts.get(n).ok_or_else(|| {
            Error::Config(format!("expert {n} out of range ({} experts)", self.experts.len()))
        })?;
        self.evaluations[n].fetch_add(1, Ordering::Relaxed);
        let w_in = tape.param(store, e.w_in);
        let b_in = tape.param(store, e.b_in);
        let w_out = tape.param(store, e.w_out);
        let b_out = tape.param(store, e.b_out);
        let h = tape.matmul(x, w_in)?;
        let h = tape.add_row(h, b_in)?;
        let h = tape.gelu(h)?;
        let y = tape.matmul(h, w_out)?;
        tape.add_row(y, b_out)
    }

    /// Weighted sum of the selected experts' outputs.
    pub fn mix(&self, tape: &mut Tape, store: &ParamStore, x: Var, gate: &GateResult) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (&n, &g) in gate.selected.iter().zip(&gate.gate_vars) {
            let y = self.expert_forward(tape, store, n, x)?;
            let y = tape.mul_scalar(y, g)?;
            acc = Some(match acc {
                None => y,
                Some(a) => tape.add(a, y)?,
            });
        }
        acc.ok_or_else(|| Error::Config("no experts selected".into()))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &TokenSequence,
    ) -> Result<(TokenSequence, GateResult)> {
        let x = seq.tokens;
        let (l, _) = tape.value(x).dims2()?;
        if l != self.seq_len {
            return Err(Error::Config(format!(
                "fusion layer is built for L = {} tokens, got {l}",
                self.seq_len
            )));
        }
        let gate = self.gate(tape, store, x)?;
        let y1 = self.mix(tape, store, x, &gate)?;
        let w1 = tape.param(store, self.weights.w1);
        let w2 = tape.param(store, self.weights.w2);
        let y2 = linear_attention(tape, x, w1, w2)?;
        let w3 = tape.param(store, self.weights.w3);
        let w4 = tape.param(store, self.weights.w4);
        let y5 = fuse_chain(tape, x, y1, y2, w3, w4)?;
        let out = tape.add(x, y5)?;
        Ok((seq.with_tokens(out), gate))
    }
}

/// Softmax, top-K selection and gate extraction from a `1×M` logit row.
pub fn gate_from_logits(tape: &mut Tape, logits_var: Var, k: usize, renormalize: bool) -> Result<GateResult> {
    let logits = tape.value(logits_var).data().to_vec();
    let m = logits.len();
    if k == 0 || k > m {
        return Err(Error::Config(format!("top_k = {k} with {m} experts")));
    }
    let probs_var = tape.row_softmax(logits_var)?;
    let probs = tape.value(probs_var).data().to_vec();
    let selected = top_k(&logits, k);
    let mut gate_vars = Vec::with_capacity(k);
    for &n in &selected {
        gate_vars.push(tape.index(probs_var, n)?);
    }
    if renormalize {
        let mut total = gate_vars[0];
        for &g in &gate_vars[1..] {
            total = tape.add(total, g)?;
        }
        for g in gate_vars.iter_mut() {
            *g = tape.div(*g, total)?;
        }
    }
    let mut gates = vec![0.0; m];
    for (&n, &g) in selected.iter().zip(&gate_vars) {
        gates[n] = tape.scalar_value(g);
    }
    Ok(GateResult {
        logits,
        probs,
        selected,
        gates,
        probs_var,
        gate_vars,
    })
}

/// `(x·W1)(x·W2)ᵀ`, an `L×L` score matrix without softmax.
pub fn linear_attention(tape: &mut Tape, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let a = tape.matmul(x, w1)?;
    let b = tape.matmul(x, w2)?;
    tape.matmul_nt(a, b)
}

/// `row_softmax(x·W3) · (y2ᵀ · y1) · W4`.
pub fn fuse_chain(tape: &mut Tape, x: Var, y1: Var, y2: Var, w3: Var, w4: Var) -> Result<Var> {
    let (l, _) = tape.value(x).dims2()?;
    let (_, w3_cols) = tape.value(w3).dims2()?;
    if w3_cols != l {
        return Err(Error::Config(format!(
            "W3 maps to {w3_cols} columns but the sequence has the fixed length L = {l}"
        )));
    }
    let y3 = tape.matmul_tn(y2, y1)?;
    let scores = tape.matmul(x, w3)?;
    let attn = tape.row_softmax(scores)?;
    let y4 = tape.matmul(attn, y3)?;
    tape.matmul(y4, w4)
}
