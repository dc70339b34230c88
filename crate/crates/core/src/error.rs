//! Crate-wide error type.

use std::fmt;
use thiserror::Error;

/// A `rows x cols` pair, used in shape diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims(pub usize, pub usize);

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({lhs} vs {rhs})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Dims,
        rhs: Dims,
    },

    #[error("tensor data length {len} does not match shape {shape}")]
    DataLength { shape: Dims, len: usize },

    #[error("{op}: expected a scalar (1x1) value, got {shape}")]
    NotScalar { op: &'static str, shape: Dims },

    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("world construction failed: {0}")]
    WorldConstruction(String),

    #[error("non-finite gradient in tensor '{tensor}'")]
    NonFiniteGradient { tensor: String },

    #[error("training diverged at step {step}: total loss is not finite")]
    Diverged { step: usize },

    #[error("unknown attribute '{0}'")]
    UnknownAttribute(String),

    #[error("not a checkpoint file (bad magic)")]
    NotACheckpoint,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt record '{name}' in checkpoint")]
    CorruptRecord { name: String },

    #[error("missing record '{name}' in checkpoint")]
    MissingRecord { name: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
