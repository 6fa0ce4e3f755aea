use std::path::PathBuf;

use crate::repair::RepairTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure at step {step}: {message}")]
    NumericFailure { step: usize, message: String },

    /// The QP at `iteration` has an empty feasible set. The trace holds every
    /// iteration before it plus a final record with the infeasible status.
    #[error("repair QP infeasible at iteration {iteration}")]
    InfeasibleRepair {
        iteration: usize,
        trace: Box<RepairTrace>,
    },

    #[error("refused: {0}")]
    Refused(String),

    #[error("internal invariant violated: {0}")]
    InternalInvariant(String),

    #[error("sample generation failed: {0}")]
    GenerationFailure(String),

    #[error(transparent)]
    Bundle(#[from] BundleError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// A bundle that failed validation. `entry` names the manifest entry (tensor,
/// role, or set) that caused the failure.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bundle entry `{entry}`: {kind}")]
pub struct BundleError {
    pub entry: String,
    pub kind: BundleErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BundleErrorKind {
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("unsupported format version {0}")]
    Version(String),
    #[error("byte range {offset}..{end} outside blob of {blob_len} bytes")]
    OutOfBounds { offset: u64, end: u64, blob_len: u64 },
    #[error("overlaps tensor `{0}`")]
    Overlap(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("role error: {0}")]
    Role(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("label error: {0}")]
    Label(String),
}

impl BundleError {
    pub(crate) fn new(entry: impl Into<String>, kind: BundleErrorKind) -> Self {
        BundleError {
            entry: entry.into(),
            kind,
        }
    }
}
