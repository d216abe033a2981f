//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! Every forward pass records onto a fresh [`Tape`]. Values are immutable once
//! recorded; [`Tape::backward`] walks the nodes once, in reverse order, and
//! returns the adjoint of every node that depends on a tracked input.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{check_finite, gemm, Operand, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    SliceRows { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    MaskRows { a: Var, keep: Vec<bool> },
    Index { a: Var, idx: usize },
    GiouLoss { pred: Var, target: [f64; 4] },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records a forward computation for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if the loss does not
    /// depend on it through tracked values.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn gelu(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// GELU (tanh form) on a plain value; shared with the expert oracle tests.
pub fn gelu_value(x: f64) -> f64 {
    gelu(x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records an untracked constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a tracked input whose gradient should be reported.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).tensor().clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, true, b, false)
    }

    fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ra, ca) = self.dims2(a)?;
        let (rb, cb) = self.dims2(b)?;
        let oa = Operand::new(self.value(a).data(), ra, ca, ta);
        let ob = Operand::new(self.value(b).data(), rb, cb, tb);
        let (m, k) = oa.dims();
        let (k2, n) = ob.dims();
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?}{} by {:?}{}: inner dimensions differ",
                self.value(a).shape(),
                if ta { "ᵀ" } else { "" },
                self.value(b).shape(),
                if tb { "ᵀ" } else { "" },
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(oa, ob, &mut out, false);
        let value = Tensor::from_parts(vec![m, n], out, "matmul")?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, tracked))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, what)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data, what)
    }

    fn map(&self, a: Var, what: &str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| f(*x)).collect();
        Tensor::from_parts(va.shape().to_vec(), data, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Sub(a, b), tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "div", |x, y| x / y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Div(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.map(a, "scale", |x| x * c)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Scale(a, c), tracked))
    }

    /// Adds the constant `c` to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.map(a, "shift", |x| x + c)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Shift(a), tracked))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let vb = self.value(bias);
        if vb.numel() != n {
            return Err(Error::Dimension(format!(
                "bias of shape {:?} cannot be added to rows of {:?}",
                vb.shape(),
                self.value(a).shape()
            )));
        }
        let b = vb.data();
        let mut out = self.value(a).data().to_vec();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::from_parts(vec![m, n], out, "add_row")?;
        let tracked = self.tracked(a) || self.tracked(bias);
        Ok(self.push(value, Op::AddRow(a, bias), tracked))
    }

    fn expect_scalar(&self, s: Var, what: &str) -> Result<f64> {
        let v = self.value(s);
        if !v.is_scalar() {
            return Err(Error::Dimension(format!(
                "{what}: expected a scalar, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    }

    /// Multiplies every element of `a` by the scalar node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.expect_scalar(s, "mul_scalar")?;
        let value = self.map(a, "mul_scalar", |x| x * c)?;
        let tracked = self.tracked(a) || self.tracked(s);
        Ok(self.push(value, Op::MulScalar(a, s), tracked))
    }

    /// Adds the scalar node `s` to every element of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.expect_scalar(s, "add_scalar")?;
        let value = self.map(a, "add_scalar", |x| x + c)?;
        let tracked = self.tracked(a) || self.tracked(s);
        Ok(self.push(value, Op::AddScalar(a, s), tracked))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, "gelu", gelu)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Gelu(a), tracked))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, "sigmoid", sigmoid)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Sigmoid(a), tracked))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, "softplus", softplus)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Softplus(a), tracked))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, "abs", f64::abs)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Abs(a), tracked))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).row_softmax()?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::RowSoftmax(a), tracked))
    }

    /// Per-row layer normalization with learned gain and bias (both length `n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Dimension(format!(
                "layer_norm over rows of width {n} with gain {:?} and bias {:?}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(vec![m, n], out, "layer_norm")?;
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Transpose(a), tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Reshape(a), tracked))
    }

    /// Sum of all elements, as a shape-`[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::from_parts(vec![1], vec![self.value(a).sum()], "sum")?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Sum(a), tracked))
    }

    /// Column means of an `m×n` matrix, as `1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let d = self.value(a).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(&d[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let value = Tensor::from_parts(vec![1, n], out, "mean_rows")?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::MeanRows(a), tracked))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if len == 0 || start + len > m {
            return Err(Error::Dimension(format!(
                "row slice {start}..{} of a {m}-row matrix",
                start + len
            )));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::from_parts(vec![len, n], data, "slice_rows")?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::SliceRows { a, start }, tracked))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(*parts.first().ok_or_else(|| Error::Dimension("empty concat".into()))?)?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pn != n {
                return Err(Error::Dimension(format!(
                    "concat_rows of widths {n} and {pn}"
                )));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let value = Tensor::from_parts(vec![m, n], data, "concat_rows")?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), tracked))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if len == 0 || start + len > n {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} of a {n}-column matrix",
                start + len
            )));
        }
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&d[r * n + start..r * n + start + len]);
        }
        let value = Tensor::from_parts(vec![m, len], data, "slice_cols")?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::SliceCols { a, start }, tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(*parts.first().ok_or_else(|| Error::Dimension("empty concat".into()))?)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(Error::Dimension(format!("concat_cols of heights {m} and {pm}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for r in 0..m {
                data[r * n + off..r * n + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::from_parts(vec![m, n], data, "concat_cols")?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Sets the rows where `keep[r]` is false to exactly `0.0`; kept rows are
    /// copied bit for bit.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if keep.len() != m {
            return Err(Error::Dimension(format!(
                "row mask of length {} for {m} rows",
                keep.len()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                data[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let value = Tensor::from_parts(vec![m, n], data, "mask_rows")?;
        let tracked = self.tracked(a);
        Ok(self.push(
            value,
            Op::MaskRows {
                a,
                keep: keep.to_vec(),
            },
            tracked,
        ))
    }

    /// Extracts flat element `idx` as a scalar.
    pub fn index(&mut self, a: Var, idx: usize) -> Result<Var> {
        let va = self.value(a);
        if idx >= va.numel() {
            return Err(Error::Dimension(format!(
                "index {idx} into tensor of {} values",
                va.numel()
            )));
        }
        let value = Tensor::from_parts(vec![1], vec![va.data()[idx]], "index")?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Index { a, idx }, tracked))
    }

    /// `1 − GIoU(pred, target)` for a predicted `(cx, cy, w, h)` box with an
    /// analytic gradient. The target is a constant.
    pub fn giou_loss(&mut self, pred: Var, target: [f64; 4]) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != 4 {
            return Err(Error::Dimension(format!(
                "giou_loss expects 4 box values, got shape {:?}",
                p.shape()
            )));
        }
        let pb = [p.data()[0], p.data()[1], p.data()[2], p.data()[3]];
        let (g, _) = giou_with_grad(pb, target);
        let value = Tensor::from_parts(vec![1], vec![1.0 - g], "giou_loss")?;
        let tracked = self.tracked(pred);
        Ok(self.push(value, Op::GiouLoss { pred, target }, tracked))
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        for g in grads.iter().flatten() {
            check_finite(g, "backward")?;
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and writes the gradient of every parameter in
    /// `store` into it. Parameters the loss does not reach get zero gradient.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for id in store.ids() {
            let g = self
                .params
                .get(&id)
                .and_then(|v| grads.wrt(*v))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; store.get(id).tensor().numel()]);
            store.get_mut(id).tensor_mut().set_grad(Some(g))?;
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let dims = |v: Var| self.nodes[v.0].value.dims2();
        // Accumulates into the adjoint of `v` if it is tracked.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if n.tracked {
                let len = n.value.numel();
                let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ra, ca) = dims(*a)?;
                let (rb, cb) = dims(*b)?;
                let (m, n) = node.value.dims2()?;
                let dc = Operand::new(dy, m, n, false);
                let dct = Operand::new(dy, m, n, true);
                acc(*a, &mut |g| {
                    if *ta {
                        gemm(Operand::new(val(*b), rb, cb, *tb), dct, g, true);
                    } else {
                        gemm(dc, Operand::new(val(*b), rb, cb, !*tb), g, true);
                    }
                });
                acc(*b, &mut |g| {
                    if *tb {
                        gemm(dct, Operand::new(val(*a), ra, ca, *ta), g, true);
                    } else {
                        gemm(Operand::new(val(*a), ra, ca, !*ta), dc, g, true);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += dy[k] * vb[k];
                    }
                });
                acc(*b, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += dy[k] * va[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += dy[k] / vb[k];
                    }
                });
                acc(*b, &mut |g| {
                    for k in 0..g.len() {
                        g[k] -= dy[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d)),
            Op::Shift(a) | Op::Reshape(a) => acc(*a, &mut |g| add_into(g, dy)),
            Op::AddRow(a, bias) => {
                acc(*a, &mut |g| add_into(g, dy));
                let (m, n) = node.value.dims2()?;
                acc(*bias, &mut |g| {
                    for r in 0..m {
                        add_into(g, &dy[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let c = val(*s)[0];
                let va = val(*a);
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d));
                acc(*s, &mut |g| g[0] += dy.iter().zip(va).map(|(d, x)| d * x).sum::<f64>());
            }
            Op::AddScalar(a, s) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*s, &mut |g| g[0] += dy.iter().sum::<f64>());
            }
            Op::Gelu(a) => {
                let va = val(*a);
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += dy[k] * gelu_grad(va[k]);
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |g| {
                for k in 0..g.len() {
                    g[k] += dy[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Softplus(a) => {
                let va = val(*a);
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += dy[k] * sigmoid(va[k]);
                    }
                });
            }
            Op::Abs(a) => {
                let va = val(*a);
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        let s = if va[k] > 0.0 {
                            1.0
                        } else if va[k] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[k] += dy[k] * s;
                    }
                });
            }
            Op::RowSoftmax(a) => {
                let (m, n) = node.value.dims2()?;
                acc(*a, &mut |g| {
                    for r in 0..m {
                        let ys = &y[r * n..(r + 1) * n];
                        let ds = &dy[r * n..(r + 1) * n];
                        let dot: f64 = ys.iter().zip(ds).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] += ys[j] * (ds[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = node.value.dims2()?;
                let gv = val(*gain);
                acc(*x, &mut |g| {
                    for r in 0..m {
                        let base = r * n;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = dy[base + j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat[base + j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let d = dy[base + j] * gv[j];
                            g[base + j] += rstd[r] * (d - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for r in 0..m {
                        for j in 0..n {
                            g[j] += dy[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for r in 0..m {
                        add_into(g, &dy[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = node.value.dims2()?;
                acc(*a, &mut |g| {
                    // node is m×n, input is n×m
                    for i in 0..m {
                        for j in 0..n {
                            g[j * m + i] += dy[i * n + j];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::MeanRows(a) => {
                let (m, n) = dims(*a)?;
                acc(*a, &mut |g| {
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] += dy[j] / m as f64;
                        }
                    }
                });
            }
            Op::SliceRows { a, start } => {
                let n = node.value.dims2()?.1;
                acc(*a, &mut |g| add_into(&mut g[start * n..start * n + dy.len()], dy));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    acc(p, &mut |g| add_into(g, &dy[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols { a, start } => {
                let (m, len) = node.value.dims2()?;
                let n = dims(*a)?.1;
                acc(*a, &mut |g| {
                    for r in 0..m {
                        add_into(&mut g[r * n + start..r * n + start + len], &dy[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let w = dims(p)?.1;
                    acc(p, &mut |g| {
                        for r in 0..m {
                            add_into(&mut g[r * w..(r + 1) * w], &dy[r * n + off..r * n + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::MaskRows { a, keep } => {
                let n = node.value.dims2()?.1;
                acc(*a, &mut |g| {
                    for (r, &k) in keep.iter().enumerate() {
                        if k {
                            add_into(&mut g[r * n..(r + 1) * n], &dy[r * n..(r + 1) * n]);
                        }
                    }
                });
            }
            Op::Index { a, idx } => acc(*a, &mut |g| g[*idx] += dy[0]),
            Op::GiouLoss { pred, target } => {
                let p = val(*pred);
                let (_, dg) = giou_with_grad([p[0], p[1], p[2], p[3]], *target);
                acc(*pred, &mut |g| {
                    for k in 0..4 {
                        g[k] -= dy[0] * dg[k];
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(g: &mut [f64], d: &[f64]) {
    g.iter_mut().zip(d).for_each(|(g, d)| *g += d);
}

/// GIoU of two `(cx, cy, w, h)` boxes and its gradient with respect to the
/// first box. Two zero-area boxes give `-1` with zero gradient.
pub(crate) fn giou_with_grad(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let (px1, px2) = (p[0] - p[2] / 2.0, p[0] + p[2] / 2.0);
    let (py1, py2) = (p[1] - p[3] / 2.0, p[1] + p[3] / 2.0);
    let (tx1, tx2) = (t[0] - t[2] / 2.0, t[0] + t[2] / 2.0);
    let (ty1, ty2) = (t[1] - t[3] / 2.0, t[1] + t[3] / 2.0);

    let iw_raw = px2.min(tx2) - px1.max(tx1);
    let ih_raw = py2.min(ty2) - py1.max(ty1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let area_p = (px2 - px1) * (py2 - py1);
    let area_t = (tx2 - tx1) * (ty2 - ty1);
    let union = area_p + area_t - inter;
    let cw = px2.max(tx2) - px1.min(tx1);
    let ch = py2.max(ty2) - py1.min(ty1);
    let enclose = cw * ch;
    if union <= 0.0 || enclose <= 0.0 {
        return (-1.0, [0.0; 4]);
    }
    let iou = inter / union;
    let giou = iou - (enclose - union) / enclose;

    // derivatives with respect to (x1, x2, y1, y2) of the predicted box
    let diw = if iw_raw > 0.0 {
        [
            if px1 > tx1 { -1.0 } else { 0.0 },
            if px2 < tx2 { 1.0 } else { 0.0 },
        ]
    } else {
        [0.0, 0.0]
    };
    let dih = if ih_raw > 0.0 {
        [
            if py1 > ty1 { -1.0 } else { 0.0 },
            if py2 < ty2 { 1.0 } else { 0.0 },
        ]
    } else {
        [0.0, 0.0]
    };
    let d_inter = [ih * diw[0], ih * diw[1], iw * dih[0], iw * dih[1]];
    let (pw, ph) = (px2 - px1, py2 - py1);
    let d_area = [-ph, ph, -pw, pw];
    let d_cw = [
        if px1 < tx1 { -1.0 } else { 0.0 },
        if px2 > tx2 { 1.0 } else { 0.0 },
    ];
    let d_ch = [
        if py1 < ty1 { -1.0 } else { 0.0 },
        if py2 > ty2 { 1.0 } else { 0.0 },
    ];
    let d_enclose = [ch * d_cw[0], ch * d_cw[1], cw * d_ch[0], cw * d_ch[1]];

    // giou = iou - 1 + union / enclose
    let mut d = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * enclose - union * d_enclose[k]) / (enclose * enclose);
        d[k] = d_iou + d_ratio;
    }
    // chain to (cx, cy, w, h)
    let grad = [
        d[0] + d[1],
        d[2] + d[3],
        (d[1] - d[0]) / 2.0,
        (d[3] - d[2]) / 2.0,
    ];
    (giou, grad)
}
