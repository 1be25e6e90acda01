//! Error type shared by every module in the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or missing input files.
    Usage,
    /// Malformed or inconsistent on-disk data.
    Format,
    /// Numerically degenerate input (zero norms, too few checkpoints, ...).
    Numeric,
    /// Training produced a non-finite loss.
    Divergence,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Format => 2,
            ErrorKind::Numeric => 3,
            ErrorKind::Divergence => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate regression: all checkpoint indices are identical")]
    DegenerateRegression,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("checkpoint list is not strictly increasing from 0: {0:?}")]
    NonMonotoneCheckpoints(Vec<usize>),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("sample id {id} out of range for {n} samples")]
    IdOutOfRange { id: usize, n: usize },

    #[error("sample id {0} is already a member of the batch")]
    DuplicateMember(usize),

    #[error("candidate pool is empty")]
    EmptyPool,

    #[error("epoch {epoch} outside [0, {total}]")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("missing input {}", path.display())]
    MissingInput { path: PathBuf },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::MissingInput { .. } => ErrorKind::Usage,
            Error::Format(_)
            | Error::DimensionMismatch(_)
            | Error::NonMonotoneCheckpoints(_)
            | Error::IdOutOfRange { .. }
            | Error::DuplicateMember(_)
            | Error::EmptyPool
            | Error::EpochOutOfRange { .. }
            | Error::Io { .. } => ErrorKind::Format,
            Error::DegenerateEmbedding(_)
            | Error::InsufficientData(_)
            | Error::DegenerateRegression => ErrorKind::Numeric,
            Error::Divergence { .. } => ErrorKind::Divergence,
        }
    }

    /// Wraps an I/O error, turning `NotFound` into [`Error::MissingInput`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput { path }
        } else {
            Error::Io { path, source }
        }
    }
}
