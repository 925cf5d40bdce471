use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures of the tensor container codec. Each variant maps to a distinct
/// process exit code in the CLI.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad magic bytes {found:?}, expected \"MPDT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported container version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated container: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("malformed container: {0}")]
    Malformed(String),
}

impl CodecError {
    pub fn code(&self) -> i32 {
        match self {
            CodecError::BadMagic { .. } => 10,
            CodecError::UnsupportedVersion { .. } => 11,
            CodecError::Truncated { .. } => 12,
            CodecError::Malformed(_) => 13,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("index out of range in {op}: {msg}")]
    Index { op: &'static str, msg: String },

    #[error("training aborted at step {step}: {msg}")]
    Training { step: u64, msg: String },

    #[error("sampling aborted at step {step}: {msg}")]
    Sampling { step: usize, msg: String },

    #[error("checkpoint config mismatch in fields: {}", fields.join(", "))]
    ResumeMismatch { fields: Vec<String> },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("unknown baseline `{0}`")]
    UnknownBaseline(String),

    #[error("failed to parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error(transparent)]
    Codec(#[from] CodecError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable category, printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::NonFinite { .. } => "non_finite",
            Error::Config(_) => "config",
            Error::Index { .. } => "index",
            Error::Training { .. } => "training",
            Error::Sampling { .. } => "sampling",
            Error::ResumeMismatch { .. } => "resume_mismatch",
            Error::CheckFailed(_) => "check_failed",
            Error::UnknownBaseline(_) => "unknown_baseline",
            Error::Parse { .. } => "parse",
            Error::Codec(CodecError::BadMagic { .. }) => "codec_bad_magic",
            Error::Codec(CodecError::UnsupportedVersion { .. }) => "codec_version",
            Error::Codec(CodecError::Truncated { .. }) => "codec_truncated",
            Error::Codec(CodecError::Malformed(_)) => "codec_malformed",
            Error::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Codec(c) => c.code(),
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::ResumeMismatch { .. } => 3,
            Error::Io { .. } => 4,
            Error::Training { .. } | Error::Sampling { .. } | Error::NonFinite { .. } => 5,
            Error::CheckFailed(_) => 6,
            _ => 1,
        }
    }
}
