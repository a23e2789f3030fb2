//! Crate-wide error type and the exit-code contract used by the CLI.

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape mismatch; the message names the offending shapes.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An op produced NaN or Inf. Surfaced immediately rather than letting
    /// bad values propagate through training.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Manifest parse problem, addressed to a 1-based file line.
    #[error("manifest error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    /// A file that should be skipped and recorded, not aborted on.
    #[error("quarantined {path}: {reason}")]
    Quarantine { path: String, reason: String },

    /// Dataset-level problem (shortfall, empty split, bad stratum, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint file problems, one variant per distinct corruption mode.
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    /// Configuration or usage problem (bad key, missing file, bad flag value).
    #[error("config error: {0}")]
    Config(String),

    /// Numeric failure outside the tensor engine (divergence, non-convergence).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Distinct failure modes of the checkpoint container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("checkpoint shape table inconsistent with payload: {0}")]
    ShapeTable(String),
    #[error("checkpoint checksum mismatch")]
    BadChecksum,
    #[error("checkpoint dtype does not match requested precision")]
    DtypeMismatch,
}

impl Error {
    /// Stable process exit code: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Manifest { .. }
            | Error::Quarantine { .. }
            | Error::Data(_)
            | Error::Checkpoint(_)
            | Error::Io(_) => 2,
            Error::Shape { .. } | Error::NonFinite { .. } | Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
