//! Dense 64-bit tensors, the reverse-mode tape, and the memory meter.

pub mod dump;
pub mod gradcheck;
pub mod meter;
mod ops;
mod tape;

use std::fmt;

use thiserror::Error;

pub use meter::{MemClass, MemoryMeter, ScopeReport};
pub use ops::{OpKind, COSINE_EPS};
pub use tape::{RegionRecord, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("{op} needs at least {min} inputs, got {got}")]
    Arity {
        op: &'static str,
        min: usize,
        got: usize,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("checkpoint region references node {0} that is not a declared region input")]
    UndeclaredCapture(usize),
    #[error("checkpoint regions cannot be nested")]
    NestedRegion,
    #[error("checkpoint region output {0} was not produced inside the region")]
    RegionOutput(usize),
    #[error("replay of checkpoint region {region} did not reproduce its outputs bit-exactly")]
    ReplayMismatch { region: usize },
    #[error("value of node {0} is not resident")]
    NotResident(usize),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

/// Value storage charged to the memory meter for as long as it lives.
pub(crate) struct Buffer {
    data: Vec<f64>,
    class: MemClass,
}

impl Buffer {
    pub(crate) fn new(data: Vec<f64>, class: MemClass) -> Self {
        meter::charge(bytes_of(&data), class);
        Buffer { data, class }
    }

    pub(crate) fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn class(&self) -> MemClass {
        self.class
    }

    fn reclass(mut self, class: MemClass) -> Self {
        if class != self.class {
            let bytes = bytes_of(&self.data);
            meter::release(bytes, self.class);
            meter::charge(bytes, class);
            self.class = class;
        }
        self
    }
}

fn bytes_of(data: &[f64]) -> u64 {
    std::mem::size_of_val(data) as u64
}

impl Drop for Buffer {
    fn drop(&mut self) {
        meter::release(bytes_of(&self.data), self.class);
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Buffer::new(self.data.clone(), self.class)
    }
}

/// Dense row-major array of `f64`.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    buf: Buffer,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        Self::with_class(shape, data, MemClass::Activation)
    }

    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        Self::with_class(shape, data, MemClass::Parameter)
    }

    pub(crate) fn with_class(
        shape: &[usize],
        data: Vec<f64>,
        class: MemClass,
    ) -> Result<Self, TensorError> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            buf: Buffer::new(data, class),
        })
    }

    pub(crate) fn from_buffer(shape: Vec<usize>, buf: Buffer) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), buf.as_slice().len());
        Tensor { shape, buf }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros shape")
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(&[1], vec![v]).expect("scalar")
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::ShapeMismatch {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Self::new(&[r, c], rows.concat())
    }

    /// Moves the buffer onto the parameter ledger.
    pub fn into_param(self) -> Self {
        Tensor {
            shape: self.shape,
            buf: self.buf.reclass(MemClass::Parameter),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.buf.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[f64] {
        self.buf.as_slice()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.buf.as_mut_slice()
    }

    pub fn mem_class(&self) -> MemClass {
        self.buf.class()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing dimension (row width for matrices, length for vectors).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values()[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values()[r * c..(r + 1) * c]
    }

    pub fn byte_len(&self) -> u64 {
        bytes_of(self.values())
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Exact equality of shape and bit patterns.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .values()
                .iter()
                .zip(other.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Little-endian bytes of the values, in order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values().iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values() == other.values()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.values())
            .finish()
    }
}
