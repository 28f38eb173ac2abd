//! Dense row-major `f32` tensors plus the two numeric primitives the rest of
//! the crate is built on: matrix multiplication and a numerically stable row
//! softmax.

use crate::error::{Error, Result};

/// Dense, contiguous, row-major tensor of `f32`.
///
/// Every dimension is at least one and `shape.iter().product() == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidTensor(
                "rank-0 tensors are not supported".into(),
            ));
        }
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!("dimension {axis} is zero")));
        }
        let numel = checked_numel(&shape)
            .ok_or_else(|| Error::InvalidTensor(format!("shape {shape:?} overflows")))?;
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = checked_numel(&shape)
            .ok_or_else(|| Error::InvalidTensor(format!("shape {shape:?} overflows")))?;
        Self::new(shape, vec![0.0; numel])
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a full multi-index.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().expect("rank >= 1");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

pub(crate) fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

fn require_rank2(t: &Tensor, op: &'static str, other: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: other.shape().to_vec(),
        }),
    }
}

/// `c = a · b` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_rank2(a, "matmul", b)?;
    let (k2, n) = require_rank2(b, "matmul", a)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite("matmul"));
    }
    let mut out = vec![0.0f32; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// i-k-j loop order so the innermost loop streams rows of `b` and `out`.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[i][j] = exp(scale·a[i][j] − M_i) / Σ_j exp(scale·a[i][j] − M_i)`
/// where `M_i` is the row maximum of the scaled logits.
pub fn row_softmax(a: &Tensor, scale: f32) -> Result<Tensor> {
    if a.ndim() != 2 {
        return Err(Error::Shape {
            op: "row_softmax",
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    if !a.is_finite() || !scale.is_finite() {
        return Err(Error::NonFinite("row_softmax"));
    }
    let cols = a.shape()[1];
    let mut data = a.data().to_vec();
    for row in data.chunks_exact_mut(cols) {
        softmax_in_place(row, scale);
    }
    Tensor::new(a.shape().to_vec(), data)
}

pub(crate) fn softmax_in_place(row: &mut [f32], scale: f32) {
    let max = row
        .iter()
        .map(|&v| v * scale)
        .fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
