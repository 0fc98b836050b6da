use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EetError {
    /// Operand extents are incompatible for the named operation.
    #[error("{op}: dimension mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Inconsistent or unsupported configuration (layouts, bands, model widths).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged in fold {fold} at epoch {epoch}: loss is not finite (lr={lr:e}, grad_norm={grad_norm:e})")]
    Diverged {
        fold: usize,
        epoch: usize,
        lr: f64,
        grad_norm: f64,
    },

    #[error("{path}: bad magic, not a {expected} file")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
    },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: corrupt header: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("{path}: truncated at record {record}")]
    Truncated { path: PathBuf, record: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EetError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        EetError::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        EetError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EetError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-parsable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            EetError::Shape { .. } => "shape",
            EetError::NonFinite { .. } => "non_finite",
            EetError::Contract(_) => "contract",
            EetError::Config(_) => "config",
            EetError::Diverged { .. } => "diverged",
            EetError::BadMagic { .. } => "bad_magic",
            EetError::Version { .. } => "version",
            EetError::CorruptHeader { .. } => "corrupt_header",
            EetError::Truncated { .. } => "truncated",
            EetError::Parse(_) => "parse",
            EetError::Io { .. } => "io",
        }
    }
}
