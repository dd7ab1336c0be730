//! Dense row-major `f64` tensors.
//!
//! This is the value type for parameters and plain numeric data. Differentiable
//! computation lives in [`crate::tape`]; a `Tensor` only carries data plus an
//! optional gradient buffer of the same shape.

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::new(vec![1], vec![x])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    /// Zero-fills (allocating if needed) the gradient buffer.
    pub fn reset_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Arithmetic mean along axis 0 of a matrix.
pub fn mean_axis0(x: &Tensor) -> Result<Tensor> {
    let rows = x.rows();
    let cols = x.cols();
    if rows == 0 {
        return Err(CoreError::EmptyReduction { op: "mean_axis0" });
    }
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += x.data()[r * cols + c];
        }
    }
    out.iter_mut().for_each(|v| *v /= rows as f64);
    Ok(Tensor::vector(out))
}

pub const NORM_EPSILON: f64 = 1e-12;

/// Scales a vector to unit Euclidean norm. A near-zero input signals a dead
/// head upstream, so it is an error rather than a silent renormalization.
pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= NORM_EPSILON {
        return Err(CoreError::DegenerateEmbedding { norm, threshold: NORM_EPSILON });
    }
    Ok(x.iter().map(|v| v / norm).collect())
}

/// Last-axis log-softmax with max subtraction, on plain data.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(CoreError::NumericDomain { op: "log_softmax", what: "NaN or Inf" });
    }
    let cols = x.cols();
    if cols == 0 {
        return Err(CoreError::EmptyReduction { op: "log_softmax" });
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(Tensor::new(x.shape().to_vec(), out))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    dot(a, b) / (na * nb)
}
