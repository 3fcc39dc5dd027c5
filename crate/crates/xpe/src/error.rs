//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes; names both operands.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An index (token id, label, row) fell outside its valid range.
    Index { what: &'static str, index: usize, bound: usize },
    /// A sequence would exceed the backbone's position table.
    Capacity { needed: usize, max: usize },
    /// Invalid configuration or component/budget mismatch.
    Config(String),
    /// A caller-visible contract was violated (non-scalar loss, unfrozen backbone, ...).
    Contract(String),
    /// Stored checksum does not match the payload.
    Integrity(String),
    /// Artifact is well-formed but does not fit this model (e.g. wrong hidden size).
    Compatibility(String),
    /// Filesystem failure, with the offending path.
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed input file (missing column, bad header, truncated payload).
    Format(String),
    /// A value fell outside its documented range (e.g. schedule step past the budget).
    Range(String),
    /// Result aggregation failed (unknown target language, empty input).
    Aggregation(String),
    /// A non-finite value surfaced where the math requires finite inputs.
    NonFinite(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::Index { what, index, bound } => {
                write!(f, "{what} {index} out of range (bound {bound})")
            }
            Self::Capacity { needed, max } => {
                write!(f, "sequence needs {needed} positions but the backbone supports {max}")
            }
            Self::Config(msg) => write!(f, "configuration error: {msg}"),
            Self::Contract(msg) => write!(f, "contract violation: {msg}"),
            Self::Integrity(msg) => write!(f, "integrity error: {msg}"),
            Self::Compatibility(msg) => write!(f, "compatibility error: {msg}"),
            Self::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
            Self::Format(msg) => write!(f, "format error: {msg}"),
            Self::Range(msg) => write!(f, "range error: {msg}"),
            Self::Aggregation(msg) => write!(f, "aggregation error: {msg}"),
            Self::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
