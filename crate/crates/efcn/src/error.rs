use std::io;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for the crate.
///
/// Variants are grouped by failure family so callers (notably the CLI) can
/// map them to distinct exit codes: usage/config problems, data-format
/// problems, numeric failures, and internal contract violations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid frame of discernment (class count, duplicate names, ...).
    #[error("invalid frame: {0}")]
    Frame(String),

    /// A class set or label is not usable in the given context.
    #[error("invalid label: {0}")]
    InvalidLabel(String),

    /// Mismatched sizes between two values that must agree.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A mass function with zero total mass cannot be normalized.
    #[error("degenerate evidence: total mass is zero, nothing to normalize")]
    DegenerateEvidence,

    /// Dempster combination of totally conflicting evidence.
    #[error("non-combinable evidence: all joint mass falls on the empty set")]
    TotalConflict,

    /// Tensor or layer shape problem; `layer` is set when it arose inside a
    /// network, so the failing stage can be reported.
    #[error("shape error{}: {msg}", match layer { Some(i) => format!(" at layer {i}"), None => String::new() })]
    Shape { layer: Option<usize>, msg: String },

    /// A parameter or activation became non-finite (NaN/inf).
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },

    /// Root finding or another numeric routine failed to converge.
    #[error("numeric failure in {what}: residual {residual:e}")]
    Numeric { what: &'static str, residual: f64 },

    /// Training aborted (diverged loss, bad batch, ...).
    #[error("training failed at epoch {epoch}, batch {batch}: {msg}")]
    Train {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    /// Malformed file contents (bad magic, truncation, version, ...).
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Underlying I/O failure.
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Helper for shape errors outside any layered context.
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape {
            layer: None,
            msg: msg.into(),
        }
    }

    /// Helper for shape errors attributed to a specific layer.
    pub fn shape_at(layer: usize, msg: impl Into<String>) -> Self {
        Error::Shape {
            layer: Some(layer),
            msg: msg.into(),
        }
    }

    /// Helper for format errors.
    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
