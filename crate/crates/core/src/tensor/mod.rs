//! Dense N-dimensional arrays with tape-based reverse-mode differentiation.
//!
//! Values are 64-bit floats. Every differentiable operation is recorded on a
//! [`Tape`] as it executes; [`Tape::backward`] then walks the record in
//! reverse and returns a [`Gradients`] table.
//!
//! Reductions use a fixed accumulation order (ascending channel, then
//! row-major kernel/spatial offset), so results are bitwise reproducible.

mod conv;
mod gradcheck;
mod norm;
mod ops;
mod pool;
mod tape;

pub use conv::ConvGeometry;
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use norm::{BatchNormMode, BatchStats};
pub use tape::{Function, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported spatial rank {0} (expected 2 or 3)")]
    RankUnsupported(usize),
    #[error("batch norm in train mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("loss is not connected to any tensor that requires a gradient")]
    DisconnectedGraph,
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(TensorError::ShapeMismatch(format!("zero extent in {shape:?}")));
        }
        if n != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| v as f64).collect())
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar(self.shape.clone()))
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Rows `[start, start+len)` along the leading axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Self> {
        let n = self.shape[0];
        if start + len > n || len == 0 {
            return Err(TensorError::ShapeMismatch(format!("batch slice {start}+{len} of {n}")));
        }
        let per = self.numel() / n;
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self::new(shape, self.data[start * per..(start + len) * per].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| TensorError::ShapeMismatch("empty stack".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch(format!("{:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Splits `[N, C, *spatial]` into `(N, C, [d, h, w])`, treating 2D as `d = 1`.
pub(crate) fn split_nc_spatial(shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    match shape.len() {
        4 => Ok((shape[0], shape[1], [1, shape[2], shape[3]])),
        5 => Ok((shape[0], shape[1], [shape[2], shape[3], shape[4]])),
        r if r >= 2 => Err(TensorError::RankUnsupported(r - 2)),
        r => Err(TensorError::ShapeMismatch(format!("rank {r} tensor has no channel axis"))),
    }
}

/// Rebuilds an `[N, C, *spatial]` shape with the same spatial rank as `like`.
pub(crate) fn join_nc_spatial(like: &[usize], n: usize, c: usize, sp: [usize; 3]) -> Vec<usize> {
    if like.len() == 4 {
        vec![n, c, sp[1], sp[2]]
    } else {
        vec![n, c, sp[0], sp[1], sp[2]]
    }
}
