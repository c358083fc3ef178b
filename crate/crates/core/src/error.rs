//! Error types for the core crate, one enum per subsystem.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("division by zero in forward pass")]
    DivByZero,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: empty reduction axis")]
    EmptyReduction { op: &'static str },
    #[error("{op}: gradient requested through a non-differentiable path")]
    NonDifferentiable { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("cannot normalize a near-zero vector (norm {norm:e})")]
    DegenerateFeature { norm: f64 },
    #[error("orientation average of an empty feature set")]
    EmptyFeatureSet,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("could not satisfy scene constraints after {attempts} attempts")]
    UnsatisfiableConfig { attempts: usize },
    #[error("invalid scene configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unknown format version {found} (supported: {supported})")]
    UnknownVersion { found: u16, supported: u16 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("malformed {what}: {msg}")]
    Malformed { what: &'static str, msg: String },
    #[error("trailing garbage after payload")]
    TrailingGarbage,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss component '{component}' at step {step}")]
    NonFiniteLoss { component: &'static str, step: u64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("image size {h}x{w} is not divisible by the network stride {stride}")]
    BadInputSize { h: usize, w: usize, stride: usize },
}
