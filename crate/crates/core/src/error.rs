//! Error type shared across the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type DctResult<T> = Result<T, DctError>;

/// Errors emitted by the tensor core, model, data pipeline, and CLI layers.
#[derive(Clone, Debug, PartialEq)]
pub enum DctError {
    /// A tensor constructor received data whose length does not match the shape.
    ShapeDataMismatch { expected: usize, got: usize },
    /// An operation was asked to combine tensors of incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An operation required a specific rank or dimension and did not get it.
    DimMismatch {
        op: &'static str,
        detail: String,
    },
    /// A NaN or infinity appeared where the contract requires finite values.
    NonFinite { op: &'static str },
    /// `backward` was called on a node that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// A node reference does not belong to the graph it was used with.
    InvalidNode { id: usize },
    /// A row or column slice exceeds the tensor bounds.
    SliceOutOfBounds {
        op: &'static str,
        start: usize,
        len: usize,
        bound: usize,
    },
    /// Configuration failed validation or parsing.
    Config { message: String },
    /// An adaptation or forward mode was invalid in the given context.
    InvalidMode { message: String },
    /// Corruption severity outside 0..=5.
    InvalidSeverity { severity: u8 },
    /// Dirichlet concentration must be strictly positive.
    InvalidConcentration { value: f64 },
    /// File I/O failure while reading or writing an artifact.
    Io { message: String },
    /// A container file did not start with the expected magic bytes.
    BadMagic { expected: &'static str },
    /// A container file is structurally damaged (truncated, bad header, ...).
    CorruptContainer { message: String },
    /// A manifest entry disagrees with the payload; names the offending tensor.
    TensorMismatch { name: String, message: String },
    /// A checkpoint does not match the run configuration.
    CheckpointMismatch { message: String },
    /// Training or adaptation produced a non-finite loss or gradient.
    Divergence { message: String },
}

impl DctError {
    /// Stable exit-code contract: 0 ok, 2 config, 3 numeric failure,
    /// 4 artifact mismatch. Anything else maps to 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            DctError::Config { .. }
            | DctError::InvalidMode { .. }
            | DctError::InvalidSeverity { .. }
            | DctError::InvalidConcentration { .. } => 2,
            DctError::NonFinite { .. } | DctError::Divergence { .. } => 3,
            DctError::Io { .. }
            | DctError::BadMagic { .. }
            | DctError::CorruptContainer { .. }
            | DctError::TensorMismatch { .. }
            | DctError::CheckpointMismatch { .. } => 4,
            _ => 1,
        }
    }
}

impl fmt::Display for DctError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DctError::ShapeDataMismatch { expected, got } => {
                write!(f, "shape/data mismatch: shape wants {expected} elements, data has {got}")
            }
            DctError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            DctError::DimMismatch { op, detail } => write!(f, "{op}: {detail}"),
            DctError::NonFinite { op } => write!(f, "{op}: non-finite value encountered"),
            DctError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            DctError::InvalidNode { id } => write!(f, "node {id} is not part of this graph"),
            DctError::SliceOutOfBounds { op, start, len, bound } => {
                write!(f, "{op}: slice {start}..{} exceeds bound {bound}", start + len)
            }
            DctError::Config { message } => write!(f, "config error: {message}"),
            DctError::InvalidMode { message } => write!(f, "invalid mode: {message}"),
            DctError::InvalidSeverity { severity } => {
                write!(f, "severity {severity} outside supported range 0..=5")
            }
            DctError::InvalidConcentration { value } => {
                write!(f, "concentration must be > 0, got {value}")
            }
            DctError::Io { message } => write!(f, "i/o error: {message}"),
            DctError::BadMagic { expected } => {
                write!(f, "bad magic bytes, expected {expected:?}")
            }
            DctError::CorruptContainer { message } => {
                write!(f, "corrupt container: {message}")
            }
            DctError::TensorMismatch { name, message } => {
                write!(f, "tensor {name:?}: {message}")
            }
            DctError::CheckpointMismatch { message } => {
                write!(f, "checkpoint mismatch: {message}")
            }
            DctError::Divergence { message } => write!(f, "numeric failure: {message}"),
        }
    }
}

impl std::error::Error for DctError {}

impl From<std::io::Error> for DctError {
    fn from(e: std::io::Error) -> Self {
        DctError::Io { message: e.to_string() }
    }
}
