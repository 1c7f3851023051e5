//! Dense 64-bit float tensors: flat row-major storage plus the raw kernels
//! that both the eager code paths and the gradient tape share.
//!
//! Every exposed operation validates shapes up front and finiteness of its
//! output; NaN or infinity is always reported as an error, never passed on.

use crate::error::{Error, Result};

/// Row-major dense tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that dimensions are positive, the element
    /// count matches the shape product, and all values are finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        let t = Tensor { shape, data };
        t.ensure_finite("tensor")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape {
                op: "from_rows",
                detail: "no rows".into(),
            });
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn value(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape {
                op: "value",
                detail: format!("expected one element, got shape {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Interprets the tensor as a matrix, returning (rows, cols).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op: "dims2",
                detail: format!("expected 2-d tensor, got {other:?}"),
            }),
        }
    }

    /// Row `r` of a matrix as a slice.
    pub fn row(&self, r: usize) -> Result<&[f64]> {
        let (rows, cols) = self.dims2()?;
        if r >= rows {
            return Err(Error::Shape {
                op: "row",
                detail: format!("row {r} out of {rows}"),
            });
        }
        Ok(&self.data[r * cols..(r + 1) * cols])
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// FNV-1a hash over the shape and the exact bit patterns of the values.
    pub fn bits_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for byte in x.to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for &d in &self.shape {
            eat(d as u64);
        }
        for &v in &self.data {
            eat(v.to_bits());
        }
        h
    }

    // ── kernels ──────────────────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2} ({:?} x {:?})", self.shape, rhs.shape),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (o, &b) in dst.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        finish(vec![m, n], out, "matmul")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        finish(vec![n, m], out, "transpose")
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.map("scale", |v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.map("add_scalar", |v| v + c)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.map("relu", |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Natural logarithm; requires strictly positive input.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.data.iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.map("log", f64::ln)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.map("exp", f64::exp)
    }

    /// Square root; requires non-negative input.
    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(bad) = self.data.iter().find(|v| **v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        self.map("sqrt", f64::sqrt)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(Error::Param {
                name: "clamp",
                detail: format!("lo {lo} > hi {hi}"),
            });
        }
        self.map("clamp", |v| v.max(lo).min(hi))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Result<Tensor> {
        Tensor::new(vec![1], vec![self.data.iter().sum()])
    }

    /// Per-row sums of a matrix: [m, n] -> [m].
    pub fn row_sums(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let out = (0..m)
            .map(|i| self.data[i * n..(i + 1) * n].iter().sum())
            .collect();
        finish(vec![m], out, "row_sums")
    }

    /// Adds a length-n bias vector to every row of an [m, n] matrix.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if bias.shape != [n] {
            return Err(Error::Shape {
                op: "add_row_bias",
                detail: format!("bias {:?} for matrix {:?}", bias.shape, self.shape),
            });
        }
        let mut out = self.data.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bias.data[j];
            }
        }
        finish(vec![m, n], out, "add_row_bias")
    }

    /// Temperature softmax along the last axis (each row of a matrix, or a
    /// 1-d tensor as a single row), computed via max subtraction.
    pub fn softmax(&self, temperature: f64) -> Result<Tensor> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Param {
                name: "temperature",
                detail: format!("must be finite and positive, got {temperature}"),
            });
        }
        let (rows, cols) = match self.shape.as_slice() {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            other => {
                return Err(Error::Shape {
                    op: "softmax",
                    detail: format!("expected 1-d or 2-d tensor, got {other:?}"),
                })
            }
        };
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = ((v - max) / temperature).exp();
                total += *o;
            }
            for o in dst.iter_mut() {
                *o /= total;
            }
        }
        finish(self.shape.clone(), out, "softmax")
    }

    /// Columns [start, start+len) of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("columns [{start}, {}) of width-{n} matrix", start + len),
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
        }
        finish(vec![m, len], out, "slice_cols")
    }

    /// Rows [start, start+len) of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if len == 0 || start + len > m {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("rows [{start}, {}) of height-{m} matrix", start + len),
            });
        }
        let out = self.data[start * n..(start + len) * n].to_vec();
        finish(vec![len, n], out, "slice_rows")
    }

    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let out = self.data.iter().map(|&v| f(v)).collect();
        finish(self.shape.clone(), out, op)
    }

    fn zip(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape, rhs.shape),
            });
        }
        let out = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        finish(self.shape.clone(), out, op)
    }
}

fn finish(shape: Vec<usize>, data: Vec<f64>, op: &'static str) -> Result<Tensor> {
    let t = Tensor { shape, data };
    t.ensure_finite(op)?;
    Ok(t)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_zero_dims_and_bad_counts() {
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn matmul_identity_preserves_input() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(x.matmul(&eye).unwrap(), x);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let z = Tensor::zeros(vec![2, 3]).unwrap();
        let out = x.matmul(&z).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[2, 3]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(vec![2, 3]).unwrap();
        let b = Tensor::zeros(vec![2, 3]).unwrap();
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_direct_formula() {
        let t = Tensor::new(vec![2], vec![2.0, 0.0]).unwrap();
        let s = t.softmax(2.0).unwrap();
        let e = (1.0f64).exp();
        let expect = e / (e + 1.0);
        assert!((s.data()[0] - expect).abs() < 1e-15);
        assert!((s.data()[0] + s.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let shifted = t.add_scalar(100.0).unwrap();
        let a = t.softmax(1.0).unwrap();
        let b = shifted.softmax(1.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_handles_extreme_logits() {
        let t = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let s = t.softmax(1.0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.softmax(0.0), Err(Error::Param { .. })));
        assert!(matches!(t.softmax(-1.0), Err(Error::Param { .. })));
    }

    #[test]
    fn relu_zeroes_negatives_only() {
        let t = Tensor::new(vec![4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        assert_eq!(t.relu().unwrap().data(), &[0.0, 0.0, 0.5, 2.0]);
    }

    #[test]
    fn log_rejects_non_positive_input() {
        let t = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(t.log(), Err(Error::Domain { .. })));
    }

    #[test]
    fn log_exp_round_trip() {
        let t = Tensor::new(vec![3], vec![0.5, 1.0, 2.5]).unwrap();
        let back = t.log().unwrap().exp().unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let t = Tensor::new(vec![1], vec![800.0]).unwrap();
        assert!(matches!(t.exp(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn slice_cols_extracts_block() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let s = t.slice_cols(1, 2).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[-5.0]), 0);
    }

    #[test]
    fn bits_hash_is_exact() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::new(vec![2], vec![1.0, 2.0 + 1e-16]).unwrap();
        assert_eq!(a.bits_hash(), b.bits_hash());
        // 2.0 + 1e-16 rounds back to 2.0 in f64, so hashes still agree:
        assert_eq!(a.bits_hash(), c.bits_hash());
        let d = Tensor::new(vec![2], vec![1.0, 2.0000000001]).unwrap();
        assert_ne!(a.bits_hash(), d.bits_hash());
    }
}
