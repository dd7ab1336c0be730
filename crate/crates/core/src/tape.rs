//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records primitive operations in topological order as they are
//! executed; [`Tape::backward`] replays them once in reverse, accumulating
//! gradients additively across fan-out. Tapes are built per training step and
//! dropped afterwards. Every softmax / log-sum-exp primitive subtracts the row
//! maximum first so that temperature-scaled similarities (up to ~1/0.015) stay
//! finite.

use crate::error::{CoreError, Result};
use crate::tensor::{Tensor, NORM_EPSILON};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    /// C = A · Bᵀ
    MatMulNT(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    GatherRows(Var, Vec<usize>),
    GatherEntries(Var, Vec<(usize, usize)>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Concat1d(Vec<Var>),
    MeanAxis0(Var),
    Sum(Var),
    LogSoftmaxRows(Var),
    CausalSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    MinElem(Var, Var),
    L2Normalize(Var),
    LogSumExp(Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

impl Node {
    fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, grad: bool, op: Op) -> Var {
        let grad = if grad { Some(vec![0.0; data.len()]) } else { None };
        self.nodes.push(Node { shape, data, grad, op });
        Var(self.nodes.len() - 1)
    }

    fn wants_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad.is_some()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ---- leaves ----

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(vec![n], data, false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.push(vec![1], vec![x], false, Op::Leaf)
    }

    // ---- elementwise and affine ----

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoreError::ShapeMismatch {
                op,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let g = self.wants_grad(a) || self.wants_grad(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, g, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let g = self.wants_grad(a) || self.wants_grad(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, g, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let g = self.wants_grad(a) || self.wants_grad(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, g, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let g = self.wants_grad(a);
        self.push(self.nodes[a.0].shape.clone(), data, g, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let g = self.wants_grad(a);
        self.push(self.nodes[a.0].shape.clone(), data, g, Op::AddConst(a))
    }

    /// Matrix + row vector, broadcast over rows.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = (self.nodes[m.0].rows(), self.nodes[m.0].cols());
        if self.nodes[v.0].data.len() != cols {
            return Err(CoreError::ShapeMismatch {
                op: "add_row",
                left: self.nodes[m.0].shape.clone(),
                right: self.nodes[v.0].shape.clone(),
            });
        }
        let mut data = self.nodes[m.0].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += self.nodes[v.0].data[c];
            }
        }
        let g = self.wants_grad(m) || self.wants_grad(v);
        Ok(self.push(self.nodes[m.0].shape.clone(), data, g, Op::AddRow(m, v)))
    }

    /// Matrix × row vector, broadcast over rows.
    pub fn mul_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = (self.nodes[m.0].rows(), self.nodes[m.0].cols());
        if self.nodes[v.0].data.len() != cols {
            return Err(CoreError::ShapeMismatch {
                op: "mul_row",
                left: self.nodes[m.0].shape.clone(),
                right: self.nodes[v.0].shape.clone(),
            });
        }
        let mut data = self.nodes[m.0].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] *= self.nodes[v.0].data[c];
            }
        }
        let g = self.wants_grad(m) || self.wants_grad(v);
        Ok(self.push(self.nodes[m.0].shape.clone(), data, g, Op::MulRow(m, v)))
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        let (k2, n) = (self.nodes[b.0].rows(), self.nodes[b.0].cols());
        if k != k2 {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let g = self.wants_grad(a) || self.wants_grad(b);
        Ok(self.push(vec![m, n], data, g, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        let (n, k2) = (self.nodes[b.0].rows(), self.nodes[b.0].cols());
        if k != k2 {
            return Err(CoreError::ShapeMismatch {
                op: "matmul_nt",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += da[i * k + p] * db[j * k + p];
                }
                data[i * n + j] = acc;
            }
        }
        let g = self.wants_grad(a) || self.wants_grad(b);
        Ok(self.push(vec![m, n], data, g, Op::MatMulNT(a, b)))
    }

    // ---- indexing and reshaping ----

    /// Row lookup: `out[t, :] = table[ids[t], :]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = (self.nodes[table.0].rows(), self.nodes[table.0].cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(CoreError::Contract {
                op: "gather_rows",
                detail: format!("row index {bad} out of range 0..{rows}"),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&self.nodes[table.0].data[i * cols..(i + 1) * cols]);
        }
        let g = self.wants_grad(table);
        Ok(self.push(vec![ids.len(), cols], data, g, Op::GatherRows(table, ids.to_vec())))
    }

    /// Picks arbitrary `(row, col)` entries into a vector.
    pub fn gather_entries(&mut self, m: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = (self.nodes[m.0].rows(), self.nodes[m.0].cols());
        for &(r, c) in entries {
            if r >= rows || c >= cols {
                return Err(CoreError::Contract {
                    op: "gather_entries",
                    detail: format!("entry ({r},{c}) out of range {rows}x{cols}"),
                });
            }
        }
        let data: Vec<f64> = entries
            .iter()
            .map(|&(r, c)| self.nodes[m.0].data[r * cols + c])
            .collect();
        let g = self.wants_grad(m);
        Ok(self.push(vec![entries.len()], data, g, Op::GatherEntries(m, entries.to_vec())))
    }

    pub fn slice_rows(&mut self, m: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = (self.nodes[m.0].rows(), self.nodes[m.0].cols());
        if start > end || end > rows {
            return Err(CoreError::Contract {
                op: "slice_rows",
                detail: format!("range {start}..{end} out of {rows} rows"),
            });
        }
        let data = self.nodes[m.0].data[start * cols..end * cols].to_vec();
        let g = self.wants_grad(m);
        Ok(self.push(vec![end - start, cols], data, g, Op::SliceRows(m, start, end)))
    }

    pub fn slice_cols(&mut self, m: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = (self.nodes[m.0].rows(), self.nodes[m.0].cols());
        if start > end || end > cols {
            return Err(CoreError::Contract {
                op: "slice_cols",
                detail: format!("range {start}..{end} out of {cols} cols"),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[m.0].data[r * cols + start..r * cols + end]);
        }
        let g = self.wants_grad(m);
        Ok(self.push(vec![rows, w], data, g, Op::SliceCols(m, start, end)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.nodes[parts[0].0].rows();
        let mut total = 0;
        for &p in parts {
            if self.nodes[p.0].rows() != rows {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[parts[0].0].shape.clone(),
                    right: self.nodes[p.0].shape.clone(),
                });
            }
            total += self.nodes[p.0].cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.nodes[p.0].cols();
                data.extend_from_slice(&self.nodes[p.0].data[r * c..(r + 1) * c]);
            }
        }
        let g = parts.iter().any(|&p| self.wants_grad(p));
        Ok(self.push(vec![rows, total], data, g, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.nodes[parts[0].0].data.len();
        for &p in parts {
            if self.nodes[p.0].data.len() != cols {
                return Err(CoreError::ShapeMismatch {
                    op: "stack_rows",
                    left: vec![cols],
                    right: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let mut data = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let g = parts.iter().any(|&p| self.wants_grad(p));
        Ok(self.push(vec![parts.len(), cols], data, g, Op::StackRows(parts.to_vec())))
    }

    pub fn concat_1d(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let g = parts.iter().any(|&p| self.wants_grad(p));
        let n = data.len();
        self.push(vec![n], data, g, Op::Concat1d(parts.to_vec()))
    }

    // ---- reductions ----

    pub fn mean_axis0(&mut self, m: Var) -> Result<Var> {
        let (rows, cols) = (self.nodes[m.0].rows(), self.nodes[m.0].cols());
        if rows == 0 {
            return Err(CoreError::EmptyReduction { op: "mean_axis0" });
        }
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += self.nodes[m.0].data[r * cols + c];
            }
        }
        data.iter_mut().for_each(|v| *v /= rows as f64);
        let g = self.wants_grad(m);
        Ok(self.push(vec![cols], data, g, Op::MeanAxis0(m)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let g = self.wants_grad(a);
        self.push(vec![1], vec![s], g, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn logsumexp(&mut self, a: Var) -> Var {
        let v = logsumexp(&self.nodes[a.0].data);
        let g = self.wants_grad(a);
        self.push(vec![1], vec![v], g, Op::LogSumExp(a))
    }

    // ---- nonlinear primitives ----

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        if !self.nodes[a.0].data.iter().all(|x| x.is_finite()) {
            return Err(CoreError::NumericDomain { op: "log_softmax", what: "NaN or Inf" });
        }
        let cols = self.nodes[a.0].cols();
        if cols == 0 {
            return Err(CoreError::EmptyReduction { op: "log_softmax" });
        }
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(cols) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let g = self.wants_grad(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, g, Op::LogSoftmaxRows(a)))
    }

    /// Row-wise softmax over a square score matrix where row `i` may attend
    /// only to columns `j <= i`; masked entries are exactly zero.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        if rows != cols {
            return Err(CoreError::ShapeMismatch {
                op: "causal_softmax",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[a.0].shape.clone(),
            });
        }
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &self.nodes[a.0].data[i * cols..i * cols + i + 1];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                data[i * cols + j] = e;
                denom += e;
            }
            for j in 0..=i {
                data[i * cols + j] /= denom;
            }
        }
        let g = self.wants_grad(a);
        Ok(self.push(vec![rows, cols], data, g, Op::CausalSoftmaxRows(a)))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine
    /// parameters; apply [`Tape::mul_row`] / [`Tape::add_row`] for gain and offset.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        if cols == 0 {
            return Err(CoreError::EmptyReduction { op: "layer_norm" });
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[a.0].data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) * inv;
            }
        }
        let g = self.wants_grad(a);
        Ok(self.push(vec![rows, cols], data, g, Op::LayerNormRows(a, eps)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu(x)).collect();
        let g = self.wants_grad(a);
        self.push(self.nodes[a.0].shape.clone(), data, g, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        let g = self.wants_grad(a);
        self.push(self.nodes[a.0].shape.clone(), data, g, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let g = self.wants_grad(a);
        self.push(self.nodes[a.0].shape.clone(), data, g, Op::Ln(a))
    }

    /// Clamp with zero gradient outside `[lo, hi]` (gradient passes at the
    /// boundary itself).
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.clamp(lo, hi)).collect();
        let g = self.wants_grad(a);
        self.push(self.nodes[a.0].shape.clone(), data, g, Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; gradient follows the smaller branch (ties go to `a`).
    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("min_elem", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| if x <= y { *x } else { *y })
            .collect();
        let g = self.wants_grad(a) || self.wants_grad(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, g, Op::MinElem(a, b)))
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let norm = self.nodes[a.0].data.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= NORM_EPSILON {
            return Err(CoreError::DegenerateEmbedding { norm, threshold: NORM_EPSILON });
        }
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x / norm).collect();
        let g = self.wants_grad(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, g, Op::L2Normalize(a)))
    }

    // ---- backward ----

    /// Seeds the root with gradient 1 and sweeps the tape once in reverse.
    /// Leaves that were created with `requires_grad` end up with `dL/dleaf`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(CoreError::NonScalarRoot { shape: self.nodes[root.0].shape.clone() });
        }
        if let Some(g) = &mut self.nodes[root.0].grad {
            g[0] = 1.0;
        } else {
            return Ok(()); // nothing on this path requires grad
        }
        for idx in (0..=root.0).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    self.accumulate(a, |_, i| g[i]);
                    self.accumulate(b, |_, i| g[i]);
                }
                Op::Sub(a, b) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    self.accumulate(a, |_, i| g[i]);
                    self.accumulate(b, |_, i| -g[i]);
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let da = self.nodes[a.0].data.clone();
                    let db = self.nodes[b.0].data.clone();
                    self.accumulate(a, |_, i| g[i] * db[i]);
                    self.accumulate(b, |_, i| g[i] * da[i]);
                }
                Op::Scale(a, c) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    self.accumulate(a, |_, i| g[i] * c);
                }
                Op::AddConst(a) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    self.accumulate(a, |_, i| g[i]);
                }
                Op::MatMul(a, b) => self.backward_matmul(idx, a, b),
                Op::MatMulNT(a, b) => self.backward_matmul_nt(idx, a, b),
                Op::AddRow(m, v) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let cols = self.nodes[idx].cols();
                    self.accumulate(m, |_, i| g[i]);
                    self.accumulate(v, |_, c| {
                        g.chunks(cols).map(|row| row[c]).sum::<f64>()
                    });
                }
                Op::MulRow(m, v) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let cols = self.nodes[idx].cols();
                    let dm = self.nodes[m.0].data.clone();
                    let dv = self.nodes[v.0].data.clone();
                    self.accumulate(m, |_, i| g[i] * dv[i % cols]);
                    self.accumulate(v, |_, c| {
                        g.iter()
                            .zip(&dm)
                            .skip(c)
                            .step_by(cols)
                            .map(|(gi, mi)| gi * mi)
                            .sum::<f64>()
                    });
                }
                Op::GatherRows(table, ids) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let cols = self.nodes[idx].cols();
                    if let Some(tg) = &mut self.nodes[table.0].grad {
                        for (t, &id) in ids.iter().enumerate() {
                            for c in 0..cols {
                                tg[id * cols + c] += g[t * cols + c];
                            }
                        }
                    }
                }
                Op::GatherEntries(m, entries) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let cols = self.nodes[m.0].cols();
                    if let Some(mg) = &mut self.nodes[m.0].grad {
                        for (k, &(r, c)) in entries.iter().enumerate() {
                            mg[r * cols + c] += g[k];
                        }
                    }
                }
                Op::SliceRows(m, start, _end) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let cols = self.nodes[m.0].cols();
                    if let Some(mg) = &mut self.nodes[m.0].grad {
                        for (i, gv) in g.iter().enumerate() {
                            mg[start * cols + i] += gv;
                        }
                    }
                }
                Op::SliceCols(m, start, end) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let cols = self.nodes[m.0].cols();
                    let w = end - start;
                    if let Some(mg) = &mut self.nodes[m.0].grad {
                        for r in 0..g.len() / w {
                            for c in 0..w {
                                mg[r * cols + start + c] += g[r * w + c];
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let total = self.nodes[idx].cols();
                    let rows = self.nodes[idx].rows();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.nodes[p.0].cols();
                        if let Some(pg) = &mut self.nodes[p.0].grad {
                            for r in 0..rows {
                                for j in 0..c {
                                    pg[r * c + j] += g[r * total + offset + j];
                                }
                            }
                        }
                        offset += c;
                    }
                }
                Op::StackRows(parts) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let cols = self.nodes[idx].cols();
                    for (r, p) in parts.iter().enumerate() {
                        if let Some(pg) = &mut self.nodes[p.0].grad {
                            for c in 0..cols {
                                pg[c] += g[r * cols + c];
                            }
                        }
                    }
                }
                Op::Concat1d(parts) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].data.len();
                        if let Some(pg) = &mut self.nodes[p.0].grad {
                            for i in 0..n {
                                pg[i] += g[offset + i];
                            }
                        }
                        offset += n;
                    }
                }
                Op::MeanAxis0(m) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let rows = self.nodes[m.0].rows() as f64;
                    let cols = self.nodes[m.0].cols();
                    self.accumulate(m, |_, i| g[i % cols] / rows);
                }
                Op::Sum(a) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    self.accumulate(a, |_, _| g[0]);
                }
                Op::LogSumExp(a) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let out = self.nodes[idx].data[0];
                    let da = self.nodes[a.0].data.clone();
                    self.accumulate(a, |_, i| g[0] * (da[i] - out).exp());
                }
                Op::LogSoftmaxRows(a) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let out = self.nodes[idx].data.clone();
                    let cols = self.nodes[idx].cols();
                    self.accumulate(a, |_, i| {
                        let row = i / cols;
                        let row_sum: f64 = g[row * cols..(row + 1) * cols].iter().sum();
                        g[i] - out[i].exp() * row_sum
                    });
                }
                Op::CausalSoftmaxRows(a) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let out = self.nodes[idx].data.clone();
                    let cols = self.nodes[idx].cols();
                    self.accumulate(a, |_, i| {
                        let row = i / cols;
                        let col = i % cols;
                        if col > row {
                            return 0.0;
                        }
                        let dot: f64 = (0..=row)
                            .map(|k| g[row * cols + k] * out[row * cols + k])
                            .sum();
                        out[i] * (g[i] - dot)
                    });
                }
                Op::LayerNormRows(a, eps) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let y = self.nodes[idx].data.clone();
                    let x = self.nodes[a.0].data.clone();
                    let cols = self.nodes[idx].cols();
                    let rows = self.nodes[idx].rows();
                    let mut dx = vec![0.0; x.len()];
                    for r in 0..rows {
                        let xs = &x[r * cols..(r + 1) * cols];
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let mean = xs.iter().sum::<f64>() / cols as f64;
                        let var =
                            xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = gs.iter().sum::<f64>() / cols as f64;
                        let gy_mean =
                            gs.iter().zip(ys).map(|(gi, yi)| gi * yi).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] = inv * (gs[c] - g_mean - ys[c] * gy_mean);
                        }
                    }
                    self.accumulate(a, |_, i| dx[i]);
                }
                Op::Gelu(a) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let da = self.nodes[a.0].data.clone();
                    self.accumulate(a, |_, i| g[i] * gelu_deriv(da[i]));
                }
                Op::Exp(a) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let out = self.nodes[idx].data.clone();
                    self.accumulate(a, |_, i| g[i] * out[i]);
                }
                Op::Ln(a) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let da = self.nodes[a.0].data.clone();
                    self.accumulate(a, |_, i| g[i] / da[i]);
                }
                Op::Clamp(a, lo, hi) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let da = self.nodes[a.0].data.clone();
                    self.accumulate(a, |_, i| if da[i] >= lo && da[i] <= hi { g[i] } else { 0.0 });
                }
                Op::MinElem(a, b) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let da = self.nodes[a.0].data.clone();
                    let db = self.nodes[b.0].data.clone();
                    self.accumulate(a, |_, i| if da[i] <= db[i] { g[i] } else { 0.0 });
                    self.accumulate(b, |_, i| if da[i] <= db[i] { 0.0 } else { g[i] });
                }
                Op::L2Normalize(a) => {
                    let g = self.nodes[idx].grad.clone().unwrap();
                    let y = self.nodes[idx].data.clone();
                    let norm = self.nodes[a.0].data.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let gy: f64 = g.iter().zip(&y).map(|(gi, yi)| gi * yi).sum();
                    self.accumulate(a, |_, i| (g[i] - y[i] * gy) / norm);
                }
            }
        }
        Ok(())
    }

    fn accumulate<F: Fn(&Node, usize) -> f64>(&mut self, v: Var, f: F) {
        // split borrow: read node metadata via raw index before mutating grad
        if self.nodes[v.0].grad.is_none() {
            return;
        }
        let n = self.nodes[v.0].data.len();
        let vals: Vec<f64> = (0..n).map(|i| f(&self.nodes[v.0], i)).collect();
        let g = self.nodes[v.0].grad.as_mut().unwrap();
        for (gi, vi) in g.iter_mut().zip(vals) {
            *gi += vi;
        }
    }

    fn backward_matmul(&mut self, idx: usize, a: Var, b: Var) {
        let g = self.nodes[idx].grad.clone().unwrap();
        let (m, k) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        let n = self.nodes[b.0].cols();
        let da = self.nodes[a.0].data.clone();
        let db = self.nodes[b.0].data.clone();
        if self.nodes[a.0].grad.is_some() {
            // dA = dC · Bᵀ
            let mut dag = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += g[i * n + j] * db[p * n + j];
                    }
                    dag[i * k + p] = acc;
                }
            }
            let ag = self.nodes[a.0].grad.as_mut().unwrap();
            ag.iter_mut().zip(dag).for_each(|(x, y)| *x += y);
        }
        if self.nodes[b.0].grad.is_some() {
            // dB = Aᵀ · dC
            let mut dbg = vec![0.0; k * n];
            for p in 0..k {
                for i in 0..m {
                    let av = da[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        dbg[p * n + j] += av * g[i * n + j];
                    }
                }
            }
            let bg = self.nodes[b.0].grad.as_mut().unwrap();
            bg.iter_mut().zip(dbg).for_each(|(x, y)| *x += y);
        }
    }

    fn backward_matmul_nt(&mut self, idx: usize, a: Var, b: Var) {
        // C = A·Bᵀ with A [m×k], B [n×k]: dA = dC·B, dB = dCᵀ·A
        let g = self.nodes[idx].grad.clone().unwrap();
        let (m, k) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        let n = self.nodes[b.0].rows();
        let da = self.nodes[a.0].data.clone();
        let db = self.nodes[b.0].data.clone();
        if self.nodes[a.0].grad.is_some() {
            let dag = matmul_raw(&g, &db, m, n, k);
            let ag = self.nodes[a.0].grad.as_mut().unwrap();
            ag.iter_mut().zip(dag).for_each(|(x, y)| *x += y);
        }
        if self.nodes[b.0].grad.is_some() {
            let mut dbg = vec![0.0; n * k];
            for j in 0..n {
                for i in 0..m {
                    let gv = g[i * n + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        dbg[j * k + p] += gv * da[i * k + p];
                    }
                }
            }
            let bg = self.nodes[b.0].grad.as_mut().unwrap();
            bg.iter_mut().zip(dbg).for_each(|(x, y)| *x += y);
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}
