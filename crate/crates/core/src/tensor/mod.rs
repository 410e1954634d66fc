//! Dense row-major `f64` tensors and the numeric kernels used by the
//! tensor-parallel engine.
//!
//! Activations of shape `(batch, seq, hidden)` are stored as 2-D
//! `(batch * seq, hidden)` matrices with batch as the outer blocking, so a
//! row split on whole-sample boundaries is a split of the leading dimension.

mod dropout;
mod nn;
mod ops;

pub use dropout::DropoutMask;
pub use nn::{
    attention_backward, attention_core_backward, attention_forward, attention_forward_cached,
    dropout, dropout_backward, gelu, gelu_backward, layernorm, layernorm_backward,
    layernorm_cached, residual_add, softmax_backward, softmax_lastdim, AttentionCache,
    AttentionGrads, AttentionWeights, LayerNormCache,
};
pub use ops::{
    concat_lastdim, concat_lastdim_into, concat_rows, matmul, matmul_backward_input,
    matmul_backward_weight, split_lastdim, split_rows,
};

use rand::Rng;
use thiserror::Error;

/// Errors raised by tensor construction and tensor kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("cannot split dimension of size {dim} into {parts} equal parts")]
    BadSplit { dim: usize, parts: usize },
    #[error("{0}: parts do not share a common shape")]
    RaggedParts(&'static str),
    #[error("{0}: no parts given")]
    Empty(&'static str),
    #[error("layernorm epsilon must be positive, got {0}")]
    InvalidEps(f64),
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("attention: {0}")]
    Attention(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor. `data.len()` always equals the product of `shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = data.len();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != len {
            return Err(TensorError::InvalidShape { shape, len });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    /// # Panics
    /// Panics if `shape` is empty or contains a zero dimension.
    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "tensor dims must be positive, got {shape:?}"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::RaggedParts("from_rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Uniform samples in `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.random_range(-scale..scale);
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn size_bytes(&self, dtype_bytes: usize) -> u64 {
        (self.len() * dtype_bytes) as u64
    }

    /// Leading dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub(crate) fn ensure_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub(crate) fn ensure_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Element `(i, j)` of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Contiguous slab of `count` leading-dim rows starting at `start`.
    pub fn rows_slice(&self, start: usize, count: usize) -> Result<Tensor> {
        if count == 0 || start + count > self.rows() {
            return Err(TensorError::BadSplit {
                dim: self.rows(),
                parts: count,
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Tensor::new(
            shape,
            self.data[start * inner..(start + count) * inner].to_vec(),
        )
    }

    /// Columns `[start, start + count)` of a 2-D tensor.
    pub fn cols_slice(&self, start: usize, count: usize) -> Result<Tensor> {
        let (r, c) = self.ensure_matrix("cols_slice")?;
        if count == 0 || start + count > c {
            return Err(TensorError::BadSplit { dim: c, parts: count });
        }
        let mut data = Vec::with_capacity(r * count);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + count]);
        }
        Tensor::new(vec![r, count], data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.ensure_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.ensure_matrix("transpose")?;
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum over the leading dimension of a 2-D tensor, giving a `[1, cols]` row.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (r, c) = self.ensure_matrix("sum_rows")?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        Tensor::new(vec![1, c], out)
    }

    /// Elementwise product summed, i.e. the Frobenius inner product.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }
}
