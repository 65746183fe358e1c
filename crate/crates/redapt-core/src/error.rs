//! Error types shared across the crate.
//!
//! Numeric code returns [`Error`] for anything a caller could plausibly
//! recover from (bad shapes, invalid configuration, ranges). Checkpoint
//! decoding has its own enum so callers can tell a corrupt file apart from
//! a merely incompatible one.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected shape) do not line up.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A tensor was built or reshaped with a shape whose element count
    /// disagrees with the data length.
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    /// A strided reduction was asked to consume a sequence shorter than one
    /// kernel window (after padding).
    #[error("sequence of length {len} too short for kernel {kernel} with padding {padding}")]
    SequenceTooShort {
        len: usize,
        kernel: usize,
        padding: usize,
    },

    /// A configuration value is out of range or internally inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A classification target index is outside the class count.
    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },

    /// `backward` was called on a non-scalar node.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },

    /// A signal operation needs non-degenerate input (e.g. normalising a
    /// constant clip).
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    /// Checkpoint encoding/decoding failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    /// Filesystem-level failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Decoding errors for the binary checkpoint format.
///
/// Each variant corresponds to a distinct way a file can be unusable, so
/// tests (and users) can assert on the precise failure.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"RAPT\", got {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checkpoint truncated while reading {context}")]
    Truncated { context: &'static str },

    #[error("unknown dtype tag {tag}")]
    UnknownDType { tag: u8 },

    #[error("entry name is not valid UTF-8")]
    NameNotUtf8,

    #[error("duplicate entry name {name:?}")]
    DuplicateEntry { name: String },

    #[error("missing entry {name:?}")]
    MissingEntry { name: String },

    #[error("entry {name:?} has shape {found:?}, expected {expected:?}")]
    EntryShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

impl Error {
    /// Helper for wrapping io errors with the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
