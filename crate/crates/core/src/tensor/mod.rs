//! Dense 2-D tensors with reverse-mode differentiation.
//!
//! Everything numeric in this crate runs on [`Tensor2D`] (row-major `f64`)
//! and the tape-based [`Graph`]. Batching is expressed as row concatenation;
//! there are no higher-rank tensors.

mod graph;
mod gradcheck;
mod params;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{layer_norm_g, linear, silu, Graph, NodeId};
pub use params::{ParamStore, Parameter};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: lhs is {lhs_rows}x{lhs_cols}, rhs is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("{op} expects {expected}, got {rows}x{cols}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength { len: usize, rows: usize, cols: usize },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss function is not deterministic: two evaluations differ")]
    NonDeterministic,
    #[error("{0}")]
    Invalid(String),
}

/// Row-major dense real matrix. The single numeric value type for features,
/// weights and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2D::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::BadLength {
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(Tensor2D { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::BadLength {
                    len: row.len(),
                    rows: r,
                    cols: c,
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor2D { rows: r, cols: c, data })
    }

    /// 1x1 tensor holding a single value.
    pub fn scalar(v: f64) -> Self {
        Tensor2D {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor2D {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn shape_err(
        op: &'static str,
        a: &Tensor2D,
        b: &Tensor2D,
    ) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        }
    }

    /// Standard matrix product.
    pub fn matmul(&self, rhs: &Tensor2D) -> Result<Tensor2D, TensorError> {
        if self.cols != rhs.rows {
            return Err(Self::shape_err("matmul", self, rhs));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = Tensor2D::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a_ip) in a_row.iter().enumerate() {
                if a_ip == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a_ip * b_pj;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Tensor2D) -> Result<Tensor2D, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(Self::shape_err("add", self, rhs));
        }
        Ok(self.zip(rhs, |a, b| a + b))
    }

    pub fn sub(&self, rhs: &Tensor2D) -> Result<Tensor2D, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(Self::shape_err("sub", self, rhs));
        }
        Ok(self.zip(rhs, |a, b| a - b))
    }

    pub fn hadamard(&self, rhs: &Tensor2D) -> Result<Tensor2D, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(Self::shape_err("hadamard", self, rhs));
        }
        Ok(self.zip(rhs, |a, b| a * b))
    }

    pub fn scale(&self, s: f64) -> Tensor2D {
        self.map(|v| v * s)
    }

    fn zip(&self, rhs: &Tensor2D, f: impl Fn(f64, f64) -> f64) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Frobenius-style max-abs difference; `usize::MAX`-safe on equal shapes only.
    pub fn max_abs_diff(&self, rhs: &Tensor2D) -> f64 {
        debug_assert_eq!(self.shape(), rhs.shape());
        self.data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Numerically stable per-row softmax of a plain tensor.
pub fn row_softmax(x: &Tensor2D) -> Tensor2D {
    let (r, c) = x.shape();
    let mut out = Tensor2D::zeros(r, c);
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out.data[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out.data[i * c + j] /= sum;
        }
    }
    out
}

/// Layer normalization of a plain tensor: per-row standardization then affine.
/// A zero-variance row normalizes to `beta`.
pub fn layer_norm(
    x: &Tensor2D,
    gamma: &Tensor2D,
    beta: &Tensor2D,
    eps: f64,
) -> Result<Tensor2D, TensorError> {
    let (r, c) = x.shape();
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != (1, c) {
            return Err(TensorError::BadShape {
                op: "layer_norm",
                expected: match name {
                    "gamma" => "gamma of shape 1 x cols",
                    _ => "beta of shape 1 x cols",
                },
                rows: t.rows(),
                cols: t.cols(),
            });
        }
    }
    let mut out = Tensor2D::zeros(r, c);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out.data[i * c + j] = gamma.data[j] * (row[j] - mean) * inv + beta.data[j];
        }
    }
    Ok(out)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
