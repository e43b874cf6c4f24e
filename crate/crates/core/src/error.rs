//! Crate-wide error type.
//!
//! Variants are grouped into four failure classes (usage, data, io,
//! numeric) so the command-line front end can map each class to a
//! distinct exit code.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // usage ------------------------------------------------------------
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown config key \"{0}\"")]
    UnknownKey(String),

    // data --------------------------------------------------------------
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("label {label} out of range 0..{limit} at line {line}")]
    LabelRange { label: i64, limit: usize, line: usize },
    #[error("image decode error in {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("token id {id} out of vocabulary range (size {size})")]
    VocabId { id: usize, size: usize },
    #[error("checkpoint has bad magic bytes {found:?}")]
    CheckpointMagic { found: [u8; 4] },
    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    // io ----------------------------------------------------------------
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // numeric -----------------------------------------------------------
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("batch error: {0}")]
    Batch(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate vector: L2 norm {norm:.3e} is below 1e-12")]
    DegenerateVector { norm: f64 },
    #[error("non-deterministic forward: two evaluations gave {first} and {second}")]
    Determinism { first: f64, second: f64 },
    #[error("optimizer state error: {0}")]
    OptimizerState(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

/// Failure class, one per CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Io,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Usage(_) | Config(_) | UnknownKey(_) => ErrorClass::Usage,
            Data(_)
            | Parse { .. }
            | LabelRange { .. }
            | Decode { .. }
            | VocabId { .. }
            | CheckpointMagic { .. }
            | CheckpointTruncated(_)
            | CheckpointVersion { .. } => ErrorClass::Data,
            Io { .. } => ErrorClass::Io,
            ShapeMismatch { .. }
            | Batch(_)
            | Contract(_)
            | DegenerateVector { .. }
            | Determinism { .. }
            | OptimizerState(_)
            | GradCheck(_) => ErrorClass::Numeric,
        }
    }

    /// Process exit code for this failure class (0 is success).
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Usage => 2,
            ErrorClass::Data => 3,
            ErrorClass::Io => 4,
            ErrorClass::Numeric => 5,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
