//! Dense row-major `f64` tensors.
//!
//! Most of the crate works with rank-2 tensors laid out as `[batch, features]`.
//! Binary elementwise ops accept either identical shapes or a broadcast over
//! the leading (batch) extent, where one side has leading extent 1.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("domain violation in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a `[1, n]` row vector.
    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    /// Builds a `[rows.len(), cols]` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent (1 for rank-0 tensors).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of values per leading index.
    pub fn cols(&self) -> usize {
        self.data.len() / self.rows()
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Validity check surfacing NaN/Inf as an error.
    pub fn check_finite(&self, context: &str) -> Result<(), TensorError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite(context.to_string()))
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
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

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Selects rows by index into a new `[idx.len(), cols]` tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row_slice(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Self { shape, data }
    }

    /// Stacks rank-2 tensors with matching column counts along the batch axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self, TensorError> {
        let cols = parts.first().map_or(0, |t| t.cols());
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![cols],
                    rhs: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, cols], data)
    }
}

/// How the second operand of a binary elementwise op lines up with the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// rhs has leading extent 1 and is repeated over lhs rows.
    RhsRows,
    /// lhs has leading extent 1 and is repeated over rhs rows.
    LhsRows,
}

pub(crate) fn broadcast_kind(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Broadcast, TensorError> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if a.len() == b.len() && !a.is_empty() && a[1..] == b[1..] {
        if b[0] == 1 {
            return Ok(Broadcast::RhsRows);
        }
        if a[0] == 1 {
            return Ok(Broadcast::LhsRows);
        }
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

pub(crate) fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TensorError> {
    let kind = broadcast_kind(op, &a.shape, &b.shape)?;
    let (shape, data) = match kind {
        Broadcast::Same => (
            a.shape.clone(),
            a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Broadcast::RhsRows => {
            let c = b.data.len();
            let data = a
                .data
                .chunks(c)
                .flat_map(|row| row.iter().zip(&b.data).map(|(&x, &y)| f(x, y)))
                .collect::<Vec<_>>();
            (a.shape.clone(), data)
        }
        Broadcast::LhsRows => {
            let c = a.data.len();
            let data = b
                .data
                .chunks(c)
                .flat_map(|row| a.data.iter().zip(row).map(|(&x, &y)| f(x, y)))
                .collect::<Vec<_>>();
            (b.shape.clone(), data)
        }
    };
    Ok(Tensor { shape, data })
}

/// `out[n, o] = a[n, k] * b[k, o]`. Each output row accumulates over `k` in
/// order, so a row's result does not depend on the other rows in the batch.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * o];
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(o)) {
        for (&a_ik, b_row) in a_row.iter().zip(b.chunks_exact(o)) {
            for (acc, &b_kj) in out_row.iter_mut().zip(b_row) {
                *acc += a_ik * b_kj;
            }
        }
    }
    out
}

/// `out[n, k] = g[n, o] * b[k, o]^T`.
pub(crate) fn matmul_rhs_t(g: &[f64], b: &[f64], n: usize, k: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for (g_row, out_row) in g.chunks_exact(o).zip(out.chunks_exact_mut(k)) {
        for (acc, b_row) in out_row.iter_mut().zip(b.chunks_exact(o)) {
            *acc = dot(g_row, b_row);
        }
    }
    out
}

/// Dot product with eight independent partial sums (fixed order, so still
/// deterministic) to let the compiler vectorize.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
        + tail
}

/// `out[k, o] = a[n, k]^T * g[n, o]`.
pub(crate) fn matmul_lhs_t(a: &[f64], g: &[f64], n: usize, k: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * o];
    for (a_row, g_row) in a.chunks_exact(k).zip(g.chunks_exact(o)).take(n) {
        for (&a_ik, out_row) in a_row.iter().zip(out.chunks_exact_mut(o)) {
            for (acc, &g_j) in out_row.iter_mut().zip(g_row) {
                *acc += a_ik * g_j;
            }
        }
    }
    out
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (n, k, o) = matmul_dims(self, other)?;
        Ok(Tensor {
            shape: vec![n, o],
            data: matmul_raw(&self.data, &other.data, n, k, o),
        })
    }
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize), TensorError> {
    if a.rank() != 2 {
        return Err(TensorError::BadRank {
            op: "matmul",
            expected: 2,
            shape: a.shape.clone(),
        });
    }
    if b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok((a.shape[0], a.shape[1], b.shape[1]))
}
