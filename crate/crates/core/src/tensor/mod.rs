//! Dense row-major tensors and the numeric kernels used by the extractor,
//! the detector head and the graph executor.
//!
//! Tensors are immutable once built: every kernel returns a fresh tensor.
//! Each tensor carries a [`Precision`] tag. `F16` tensors store widened `f32`
//! values that are always exactly representable in IEEE 754 binary16; kernels
//! accumulate in wider precision and round their outputs back through binary16.

pub mod half;
mod ops;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ops::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F16,
}

impl Precision {
    /// Storage size of one element at this precision.
    pub fn elem_bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F16 => 2,
        }
    }

    /// Result precision of an op over inputs of precisions `a` and `b`.
    pub fn join(self, other: Precision) -> Precision {
        if self == Precision::F16 || other == Precision::F16 {
            Precision::F16
        } else {
            Precision::F32
        }
    }

    /// Rounds a buffer in place so that it conforms to this precision.
    pub fn conform(self, data: &mut [f32]) {
        if self == Precision::F16 {
            half::round_slice(data);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but the buffer has {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {axis} mismatch (expected {expected}, got {actual})")]
    AxisMismatch {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    precision: Precision,
}

impl Tensor {
    /// Builds an `F32` tensor, checking that the buffer matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::with_precision(shape, data, Precision::F32)
    }

    /// Builds a tensor at the given precision; `F16` data is rounded on entry.
    pub fn with_precision(shape: Vec<usize>, mut data: Vec<f32>, precision: Precision) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        precision.conform(&mut data);
        Ok(Tensor { shape, data, precision })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("zero extent in Tensor::full")
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            precision: Precision::F32,
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[f32]) -> Self {
        Tensor::new(vec![values.len()], values.to_vec()).expect("empty slice")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Returns a copy converted to `precision` (rounding when narrowing).
    pub fn to_precision(&self, precision: Precision) -> Tensor {
        let mut data = self.data.clone();
        precision.conform(&mut data);
        Tensor {
            shape: self.shape.clone(),
            data,
            precision,
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::with_precision(shape.to_vec(), self.data.clone(), self.precision)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a multi-index. Panics when out of range.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i} of extent {ext}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Internal constructor for kernels that already produced a conforming buffer.
    pub(crate) fn from_parts(shape: Vec<usize>, mut data: Vec<f32>, precision: Precision) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        precision.conform(&mut data);
        Tensor { shape, data, precision }
    }
}
