//! Reverse-mode automatic differentiation over a gradient tape.
//!
//! A `Tape` records every primitive operation in execution order; `backward`
//! walks the record in exact reverse order, accumulating gradients additively
//! so a value feeding several consumers receives the sum of their adjoints.
//! Tapes are built fresh per training step and dropped afterwards.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    RowSums(usize),
    AddRowBias(usize, usize),
    Softmax(usize, f64),
    SliceCols(usize, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations plus their forward values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter. Gradients flow to leaves but no further.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Forward value of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref().map(|g| &g[v.0])
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.grads = None; // stale gradients die with any new recording
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Result<Tensor>, op: Op) -> Result<Var> {
        Ok(self.push(value?, op))
    }

    // ── recorded primitives ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b));
        self.record(v, Op::Matmul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.record(v, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b));
        self.record(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b));
        self.record(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b));
        self.record(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.record(v, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).add_scalar(c);
        self.record(v, Op::AddScalar(a.0))
    }

    /// Rectified linear unit; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).relu();
        self.record(v, Op::Relu(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).log();
        self.record(v, Op::Log(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).exp();
        self.record(v, Op::Exp(a.0))
    }

    /// Square root; the derivative at exactly zero is taken as zero so that
    /// a loss sitting at its minimum produces a null update instead of NaN.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sqrt();
        self.record(v, Op::Sqrt(a.0))
    }

    /// Clamps to [lo, hi]; gradients pass through unclamped entries only.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(a).clamp(lo, hi);
        self.record(v, Op::Clamp(a.0, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sum();
        self.record(v, Op::Sum(a.0))
    }

    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).row_sums();
        self.record(v, Op::RowSums(a.0))
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = self.value(a).add_row_bias(self.value(bias));
        self.record(v, Op::AddRowBias(a.0, bias.0))
    }

    /// Temperature softmax along the last axis.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let v = self.value(a).softmax(temperature);
        self.record(v, Op::Softmax(a.0, temperature))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len);
        self.record(v, Op::SliceCols(a.0, start, len))
    }

    // ── backward pass ────────────────────────────────────────────────────

    /// Accumulates d(loss)/d(node) for every node recorded before `loss`.
    /// `loss` must hold exactly one element.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            });
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()).expect("node shapes are valid"))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        // Nodes only reference earlier nodes, so a reverse index walk visits
        // the recording in exact reverse topological order.
        for i in (0..=loss.0).rev() {
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let up = grads[i].clone();
                    let da = up.matmul(&self.nodes[b].value.transpose()?)?;
                    let db = self.nodes[a].value.transpose()?.matmul(&up)?;
                    accumulate(&mut grads[a], &da);
                    accumulate(&mut grads[b], &db);
                }
                Op::Transpose(a) => {
                    let da = grads[i].transpose()?;
                    accumulate(&mut grads[a], &da);
                }
                Op::Add(a, b) => {
                    let up = grads[i].clone();
                    accumulate(&mut grads[a], &up);
                    accumulate(&mut grads[b], &up);
                }
                Op::Sub(a, b) => {
                    let up = grads[i].clone();
                    accumulate(&mut grads[a], &up);
                    let neg = up.scale(-1.0)?;
                    accumulate(&mut grads[b], &neg);
                }
                Op::Mul(a, b) => {
                    let da = grads[i].mul(&self.nodes[b].value)?;
                    let db = grads[i].mul(&self.nodes[a].value)?;
                    accumulate(&mut grads[a], &da);
                    accumulate(&mut grads[b], &db);
                }
                Op::Scale(a, c) => {
                    let da = grads[i].scale(c)?;
                    accumulate(&mut grads[a], &da);
                }
                Op::AddScalar(a) => {
                    let up = grads[i].clone();
                    accumulate(&mut grads[a], &up);
                }
                Op::Relu(a) => {
                    let mut da = grads[i].clone();
                    for (g, &x) in da.data_mut().iter_mut().zip(self.nodes[a].value.data()) {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads[a], &da);
                }
                Op::Log(a) => {
                    let mut da = grads[i].clone();
                    for (g, &x) in da.data_mut().iter_mut().zip(self.nodes[a].value.data()) {
                        *g /= x;
                    }
                    accumulate(&mut grads[a], &da);
                }
                Op::Exp(a) => {
                    let da = grads[i].mul(&self.nodes[i].value)?;
                    accumulate(&mut grads[a], &da);
                }
                Op::Sqrt(a) => {
                    let mut da = grads[i].clone();
                    for (g, &y) in da.data_mut().iter_mut().zip(self.nodes[i].value.data()) {
                        *g = if y > 0.0 { *g * 0.5 / y } else { 0.0 };
                    }
                    accumulate(&mut grads[a], &da);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut da = grads[i].clone();
                    for (g, &x) in da.data_mut().iter_mut().zip(self.nodes[a].value.data()) {
                        if x < lo || x > hi {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads[a], &da);
                }
                Op::Sum(a) => {
                    let g = grads[i].data()[0];
                    let shape = self.nodes[a].value.shape().to_vec();
                    let numel: usize = shape.iter().product();
                    let da = Tensor::new(shape, vec![g; numel])?;
                    accumulate(&mut grads[a], &da);
                }
                Op::RowSums(a) => {
                    let (m, n) = self.nodes[a].value.dims2()?;
                    let mut data = vec![0.0; m * n];
                    for r in 0..m {
                        let g = grads[i].data()[r];
                        for item in data.iter_mut().skip(r * n).take(n) {
                            *item = g;
                        }
                    }
                    let da = Tensor::new(vec![m, n], data)?;
                    accumulate(&mut grads[a], &da);
                }
                Op::AddRowBias(a, b) => {
                    let up = grads[i].clone();
                    accumulate(&mut grads[a], &up);
                    let (m, n) = up.dims2()?;
                    let mut cols = vec![0.0; n];
                    for r in 0..m {
                        for (j, c) in cols.iter_mut().enumerate() {
                            *c += up.data()[r * n + j];
                        }
                    }
                    let db = Tensor::new(vec![n], cols)?;
                    accumulate(&mut grads[b], &db);
                }
                Op::Softmax(a, tau) => {
                    // dx_j = (g_j - sum_k g_k y_k) * y_j / tau, per row.
                    let y = &self.nodes[i].value;
                    let up = &grads[i];
                    let (rows, cols) = match y.shape() {
                        [n] => (1, *n),
                        [m, n] => (*m, *n),
                        _ => unreachable!("softmax output is 1-d or 2-d"),
                    };
                    let mut data = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let ys = &y.data()[r * cols..(r + 1) * cols];
                        let gs = &up.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..cols {
                            data[r * cols + j] = (gs[j] - dot) * ys[j] / tau;
                        }
                    }
                    let da = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
                    accumulate(&mut grads[a], &da);
                }
                Op::SliceCols(a, start, len) => {
                    let (m, n) = self.nodes[a].value.dims2()?;
                    let mut data = vec![0.0; m * n];
                    for r in 0..m {
                        for j in 0..len {
                            data[r * n + start + j] = grads[i].data()[r * len + j];
                        }
                    }
                    let da = Tensor::new(vec![m, n], data)?;
                    accumulate(&mut grads[a], &da);
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use frost_oracles::finite_difference_gradient;

    #[test]
    fn backward_of_square_is_two_x() {
        // f(x) = sum(x * x) at x = 3 gives df/dx = 6 through two product paths.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(x).unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_then_sum_has_zero_gradient() {
        // sum(softmax(x)) == 1 identically, so the gradient must vanish.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap());
        let s = tape.softmax(x, 1.0).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        for g in tape.grad(x).unwrap().data() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        // loss(w) = sum(relu(x W1) W2), differentiated w.r.t. both weights.
        let x = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.3]]).unwrap();
        let w1_0 = vec![0.2, -0.4, 0.7, 0.1, 0.05, -0.3];
        let w2_0 = vec![0.9, -0.2, 0.4];

        let eval = |w1: &[f64], w2: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let w1v = tape.leaf(Tensor::new(vec![2, 3], w1.to_vec()).unwrap());
            let w2v = tape.leaf(Tensor::new(vec![3, 1], w2.to_vec()).unwrap());
            let h = tape.matmul(xv, w1v).unwrap();
            let h = tape.relu(h).unwrap();
            let o = tape.matmul(h, w2v).unwrap();
            let loss = tape.sum(o).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.value(loss).data()[0],
                tape.grad(w1v).unwrap().data().to_vec(),
                tape.grad(w2v).unwrap().data().to_vec(),
            )
        };

        let (_, g1, g2) = eval(&w1_0, &w2_0);
        let fd1 = finite_difference_gradient(
            |w| {
                let (l, _, _) = eval(w, &w2_0);
                l
            },
            &w1_0,
            1e-5,
        );
        let fd2 = finite_difference_gradient(
            |w| {
                let (l, _, _) = eval(&w1_0, w);
                l
            },
            &w2_0,
            1e-5,
        );
        for (a, b) in g1.iter().zip(&fd1) {
            assert!((a - b).abs() < 1e-6, "w1 grad {a} vs fd {b}");
        }
        for (a, b) in g2.iter().zip(&fd2) {
            assert!((a - b).abs() < 1e-6, "w2 grad {a} vs fd {b}");
        }
    }

    #[test]
    fn gradients_accumulate_across_paths() {
        // f(x) = sum(x + x): every element's gradient is exactly 2.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let two_x = tape.add(x, x).unwrap();
        let loss = tape.sum(two_x).unwrap();
        tape.backward(loss).unwrap();
        for g in tape.grad(x).unwrap().data() {
            assert!((g - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 1.0]).unwrap());
        let r = tape.relu(x).unwrap();
        let loss = tape.sum(r).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.5, 2.0, -1.0]).unwrap());
        let c = tape.clamp(x, 0.0, 1.0).unwrap();
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn sqrt_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.0, 4.0]).unwrap());
        let s = tape.sqrt(x).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap().data();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        // Exercise transpose, slice, row_sums, bias, clamp, log, exp, sqrt.
        let x0 = vec![0.4, 1.3, -0.2, 0.9, 2.1, 0.7];
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::new(vec![2, 3], x.to_vec()).unwrap());
            let b = tape.leaf(Tensor::new(vec![2], vec![0.3, -0.1]).unwrap());
            let t = tape.transpose(xv).unwrap(); // [3,2]
            let t = tape.add_row_bias(t, b).unwrap();
            let s = tape.slice_cols(t, 0, 2).unwrap();
            let e = tape.exp(s).unwrap();
            let c = tape.clamp(e, 0.5, 6.0).unwrap();
            let l = tape.log(c).unwrap();
            let sq = tape.mul(l, l).unwrap();
            let rs = tape.row_sums(sq).unwrap();
            let sum = tape.sum(rs).unwrap();
            let half = tape.scale(sum, 0.5).unwrap();
            let shifted = tape.add_scalar(half, 1.0).unwrap();
            let root = tape.sqrt(shifted).unwrap();
            tape.backward(root).unwrap();
            (
                tape.value(root).data()[0],
                tape.grad(xv).unwrap().data().to_vec(),
            )
        };
        let (_, g) = eval(&x0);
        let fd = finite_difference_gradient(|x| eval(x).0, &x0, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-5, "grad {a} vs fd {b}");
        }
    }

    #[test]
    fn log_of_non_positive_is_rejected_on_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, -3.0]).unwrap());
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    }
}
