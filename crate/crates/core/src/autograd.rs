//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order. Calling
//! [`Tape::backward`] on a 1x1 node walks the record in reverse and returns the
//! adjoint of every node that (transitively) depends on a differentiable leaf.
//! Tapes are cheap to build and are meant to be thrown away after one
//! forward/backward pass.

use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulConst(Var, Matrix),
    AddConst(Var),
    Transpose(Var),
    Reshape(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    LogSumExp(Var),
    Norm2(Var),
    ColSlice(Var, usize),
    HConcat(Vec<Var>),
    VConcat(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    RepeatRows(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn wrt_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn softmax_row(row: &mut [f64]) {
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input (a parameter or anything we want an adjoint for).
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a * bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a 1 x c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let rv = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Div(a, b), ng)
    }

    /// Multiplies every entry of `a` by the 1x1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(a).scale(k);
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::ScaleBy(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(value, Op::Offset(a), ng)
    }

    /// Elementwise product with a constant matrix (masks, dropout).
    pub fn mul_const(&mut self, a: Var, m: Matrix) -> Var {
        let value = self.value(a).zip_map(&m, |x, y| x * y);
        let ng = self.ng(a);
        self.push(value, Op::MulConst(a, m), ng)
    }

    pub fn add_const(&mut self, a: Var, m: &Matrix) -> Var {
        let value = self.value(a).zip_map(m, |x, y| x + y);
        let ng = self.ng(a);
        self.push(value, Op::AddConst(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Same entries in row-major order, laid out as `rows x cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), rows * cols, "reshape must keep the entry count");
        let value = Matrix::from_vec(rows, cols, v.data().to_vec());
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(value, Op::Log(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(value, Op::Abs(a), ng)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_row(value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both 1 x c).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c));
        assert_eq!(self.shape(beta), (1, c));
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = Matrix::zeros(r, c);
        let mut out = Matrix::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let n = (row[j] - mean) * is;
                normalized.set(i, j, n);
                out.set(i, j, n * g[j] + b[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Column sums: r x c -> 1 x c.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Matrix::zeros(1, v.cols());
        for i in 0..v.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    /// Row sums: r x c -> r x 1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Matrix::from_vec(
            v.rows(),
            1,
            (0..v.rows()).map(|i| v.row(i).iter().sum()).collect(),
        );
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    /// Column means: r x c -> 1 x c.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let r = self.shape(a).0;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / r as f64)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `log Σ exp(a)` over all entries.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let max = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = if max.is_finite() {
            max + v.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln()
        } else {
            max
        };
        let ng = self.ng(a);
        self.push(Matrix::scalar(lse), Op::LogSumExp(a), ng)
    }

    /// Euclidean (Frobenius) norm; the subgradient at the origin is taken as zero.
    pub fn norm2(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).frobenius_norm());
        let ng = self.ng(a);
        self.push(value, Op::Norm2(a), ng)
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.cols(), "column slice out of range");
        let out = Matrix::from_fn(v.rows(), len, |i, j| v.get(i, start + j));
        let ng = self.ng(a);
        self.push(out, Op::ColSlice(a, start), ng)
    }

    pub fn hconcat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "hconcat row mismatch");
            for i in 0..rows {
                out.row_mut(i)[offset..offset + v.cols()].copy_from_slice(v.row(i));
            }
            offset += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::HConcat(parts.to_vec()), ng)
    }

    pub fn vconcat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "vconcat column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::VConcat(parts.to_vec()),
            ng,
        )
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * v.cols());
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let out = Matrix::from_vec(idx.len(), v.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::SelectRows(a, idx.to_vec()), ng)
    }

    /// Stacks `n` copies of the 1 x c row `a`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.rows(), 1, "repeat_rows expects a row vector");
        let mut data = Vec::with_capacity(n * v.cols());
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let out = Matrix::from_vec(n, v.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::RepeatRows(a), ng)
    }

    /// Inner product of two same-shape nodes as a 1x1 node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum(m)
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward requires a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let val = &node.value;
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ ; da = g b ; db = gᵀ a
                if self.ng(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.ng(*row) {
                    let mut s = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, x) in s.data_mut().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(*row, s);
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.ng(*a) {
                    acc(*a, g.zip_map(bv, |x, y| x / y));
                }
                if self.ng(*b) {
                    // d(a/b)/db = -out / b
                    let t = val.zip_map(bv, |o, y| -o / y);
                    acc(*b, g.zip_map(&t, |x, y| x * y));
                }
            }
            Op::ScaleBy(a, s) => {
                let k = self.scalar(*s);
                if self.ng(*a) {
                    acc(*a, g.scale(k));
                }
                if self.ng(*s) {
                    let d: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    acc(*s, Matrix::scalar(d));
                }
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k)),
            Op::Offset(a) | Op::AddConst(a) => acc(*a, g.clone()),
            Op::MulConst(a, m) => acc(*a, g.zip_map(m, |x, y| x * y)),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::from_vec(r, c, g.data().to_vec()))
            }
            Op::Exp(a) => acc(*a, g.zip_map(val, |x, y| x * y)),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x / y)),
            Op::Tanh(a) => acc(*a, g.zip_map(val, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * gelu_grad(y))),
            Op::Abs(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * y.signum() * (y != 0.0) as u8 as f64)),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.zip_map(self.value(*a), |x, y| if y >= *lo && y <= *hi { x } else { 0.0 }),
            ),
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(val.rows(), val.cols());
                for i in 0..val.rows() {
                    let y = val.row(i);
                    let gy = g.row(i);
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for (j, o) in d.row_mut(i).iter_mut().enumerate() {
                        *o = y[j] * (gy[j] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (r, c) = normalized.shape();
                let gam = self.value(*gamma).data();
                if self.ng(*gamma) {
                    let mut dg = Matrix::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            dg.data_mut()[j] += g.get(i, j) * normalized.get(i, j);
                        }
                    }
                    acc(*gamma, dg);
                }
                if self.ng(*beta) {
                    let mut db = Matrix::zeros(1, c);
                    for i in 0..r {
                        for (o, x) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(*beta, db);
                }
                if self.ng(*x) {
                    let mut dx = Matrix::zeros(r, c);
                    for i in 0..r {
                        let n = normalized.row(i);
                        let dn: Vec<f64> = g.row(i).iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dn = dn.iter().sum::<f64>() / c as f64;
                        let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (dn[j] - mean_dn - n[j] * mean_dn_n);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i).copy_from_slice(g.data());
                }
                acc(*a, d);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::LogSumExp(a) => {
                let lse = val.item();
                let gi = g.item();
                acc(*a, self.value(*a).map(|x| gi * (x - lse).exp()));
            }
            Op::Norm2(a) => {
                let n = val.item();
                let gi = g.item();
                if n > 0.0 {
                    acc(*a, self.value(*a).map(|x| gi * x / n));
                }
            }
            Op::ColSlice(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, d);
            }
            Op::HConcat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        acc(p, Matrix::from_fn(r, c, |i, j| g.get(i, offset + j)));
                    }
                    offset += c;
                }
            }
            Op::VConcat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let start = offset * c;
                        acc(
                            p,
                            Matrix::from_vec(r, c, g.data()[start..start + r * c].to_vec()),
                        );
                    }
                    offset += r;
                }
            }
            Op::SelectRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, x) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                acc(*a, d);
            }
            Op::RepeatRows(a) => {
                let mut d = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, x) in d.data_mut().iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(*a, d);
            }
        }
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &Matrix, step: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let up = f(&probe);
        probe.data_mut()[k] = orig - step;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (up - down) / (2.0 * step);
    }
    grad
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)` used by gradient checks.
pub fn relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).frobenius_norm();
    diff / a.frobenius_norm().max(b.frobenius_norm()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Checks d f / d x for a graph built by `build` from a single input.
    fn check(x: Matrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let out = build(&mut tape, xv);
        let grads = tape.backward(out);
        let analytic = grads.wrt_or_zeros(xv, x.shape());
        let numeric = finite_difference(&x, 1e-5, |p| {
            let mut t = Tape::new();
            let v = t.param(p.clone());
            let o = build(&mut t, v);
            t.scalar(o)
        });
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-6, "relative error {err}\n{analytic:?}\n{numeric:?}");
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 4);
        check(x.clone(), |t, v| {
            let a = t.tanh(v);
            let b = t.gelu(a);
            let c = t.exp(b);
            let d = t.mul(c, v);
            t.sum(d)
        });
        check(x.map(|v| v.abs() + 0.5), |t, v| {
            let l = t.log(v);
            let s = t.scale(l, 3.0);
            let d = t.div(s, v);
            t.sum(d)
        });
    }

    #[test]
    fn matrix_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&mut rng, 4, 3);
        let x = random(&mut rng, 5, 4);
        check(x.clone(), |t, v| {
            let wv = t.constant(w.clone());
            let y = t.matmul(v, wv);
            let s = t.softmax_rows(y);
            let q = t.matmul_t(s, s);
            let tr = t.transpose(q);
            let m = t.mul(q, tr);
            t.logsumexp(m)
        });
        let gamma = random(&mut rng, 1, 4);
        let beta = random(&mut rng, 1, 4);
        check(x.clone(), |t, v| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let n = t.layer_norm(v, g, b);
            let sq = t.mul(n, n);
            let sl = t.col_slice(sq, 1, 2);
            let cat = t.hconcat(&[sl, v]);
            let rows = t.select_rows(cat, &[0, 2, 2]);
            let m = t.mean_rows(rows);
            let r = t.repeat_rows(m, 3);
            let flat = t.reshape(r, 2, 9);
            let n2 = t.norm2(flat);
            let cs = t.sum_cols(v);
            let cs2 = t.mul(cs, cs);
            let s2 = t.sum(cs2);
            t.add(n2, s2)
        });
    }

    #[test]
    fn layer_norm_parameters_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 3, 5);
        let target = random(&mut rng, 3, 5);
        let gamma = random(&mut rng, 1, 5);
        check(gamma.clone(), |t, g| {
            let xv = t.constant(x.clone());
            let b = t.constant(Matrix::zeros(1, 5));
            let n = t.layer_norm(xv, g, b);
            let tv = t.constant(target.clone());
            let d = t.mul(n, tv);
            t.sum(d)
        });
    }

    #[test]
    fn norm2_at_origin_has_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::zeros(2, 2));
        let n = tape.norm2(x);
        let g = tape.backward(n);
        assert!(g.wrt(x).is_none());
        assert_eq!(tape.scalar(n), 0.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::scalar(2.0));
        let p = tape.param(Matrix::scalar(3.0));
        let y = tape.mul(c, p);
        let g = tape.backward(y);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(p).unwrap().item(), 2.0);
    }
}
