//! Dense row-major `f64` tensors and the raw kernels shared by the tape.

use std::fmt;

use crate::error::{Error, Result};

/// A dense n-dimensional array of finite `f64` values in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the data and that every
    /// value is finite.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must be non-empty with positive extents"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds an `m×n` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new([m, n], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Internal constructor for kernel outputs whose shape is already known to
    /// match. Finiteness is still enforced.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, what: &str) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        check_finite(&data, what)?;
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::Dimension(format!(
                    "gradient of length {} for tensor of {} values",
                    g.len(),
                    self.data.len()
                )));
            }
        }
        self.grad = grad;
        Ok(())
    }

    /// Overwrites the values in place. Used by the optimizer and by
    /// finite-difference probes.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::Dimension(format!(
                "expected a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[self.shape.len() - 1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.shape[self.shape.len() - 1];
        &self.data[row * n..(row + 1) * n]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_parts(vec![n, m], out, "transpose")
    }

    /// Standard matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}: inner dimensions differ",
                self.shape, other.shape
            )));
        }
        check_finite(&self.data, "matmul lhs")?;
        check_finite(&other.data, "matmul rhs")?;
        let mut out = vec![0.0; m * n];
        gemm(
            Operand::new(&self.data, m, k, false),
            Operand::new(&other.data, k, n, false),
            &mut out,
            false,
        );
        Tensor::from_parts(vec![m, n], out, "matmul")
    }

    /// Softmax along each row, with per-row max subtraction.
    pub fn row_softmax(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        check_finite(&self.data, "row_softmax input")?;
        let mut out = self.data.clone();
        softmax_rows_in_place(&mut out, m, n);
        Tensor::from_parts(vec![m, n], out, "row_softmax")
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "{what}: non-finite value {} at flat index {pos}",
            data[pos]
        )));
    }
    Ok(())
}

pub(crate) fn softmax_rows_in_place(data: &mut [f64], m: usize, n: usize) {
    for r in 0..m {
        let row = &mut data[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// A row-major matrix viewed either as stored or transposed.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a> Operand<'a> {
    pub(crate) fn new(data: &'a [f64], rows: usize, cols: usize, transposed: bool) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Operand {
            data,
            rows,
            cols,
            transposed,
        }
    }

    /// Logical (rows, cols) after the optional transpose.
    pub(crate) fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = op(a)·op(b)`, or `out += op(a)·op(b)` when `accumulate` is set.
pub(crate) fn gemm(a: Operand<'_>, b: Operand<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output size");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the operand slices hold rows*cols values and the strides describe
    // exactly that extent; `out` holds m*n values with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let c = a.matmul(&Tensor::identity(2)).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_column() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_scalar_case() {
        let a = Tensor::new([1, 1], vec![2.0]).unwrap();
        let b = Tensor::new([1, 1], vec![3.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Tensor::new([2], vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            Tensor::new([2], vec![1.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn transposed_gemm_matches_loops() {
        let a = Tensor::new([3, 4], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let b = Tensor::new([5, 4], (0..20).map(|v| (v as f64).sin()).collect()).unwrap();
        let bt = b.transpose().unwrap();
        let mut out = vec![0.0; 15];
        gemm(
            Operand::new(a.data(), 3, 4, false),
            Operand::new(b.data(), 5, 4, true),
            &mut out,
            false,
        );
        let want = naive(&a, &bt);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(t.row_softmax().unwrap().data(), &[0.5, 0.5]);

        let t = Tensor::from_rows(&[vec![2.0, 1.0, 0.0, -1.0]]).unwrap();
        let s = t.row_softmax().unwrap();
        // exp/sum oracle evaluated independently
        let e: Vec<f64> = [2.0f64, 1.0, 0.0, -1.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let want = [0.64391, 0.23688, 0.08714, 0.03206];
        for i in 0..4 {
            assert!((s.data()[i] - want[i]).abs() < 1e-5);
            assert!((s.data()[i] - e[i] / z).abs() < 1e-15);
        }

        let t = Tensor::from_rows(&[vec![1000.0, 1000.0]]).unwrap();
        assert_eq!(t.row_softmax().unwrap().data(), &[0.5, 0.5]);
    }
}
