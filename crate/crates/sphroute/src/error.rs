use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] sphroute_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{what} hash mismatch: expected {expected}, found {found}")]
    ConfigMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("missing {0}")]
    Missing(String),
    #[error("dataset does not match manifest at sample {id}")]
    ManifestMismatch { id: String },
    #[error("finite-difference check failed: {0}")]
    GradCheck(String),
}

impl Error {
    /// Stable identifier for the error line printed by the command-line driver.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(sphroute_core::Error::NonFiniteLoss { .. }) => "non_finite_loss",
            Error::Core(_) => "core",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::ConfigMismatch { .. } => "config_mismatch",
            Error::Missing(_) => "missing",
            Error::ManifestMismatch { .. } => "manifest_mismatch",
            Error::GradCheck(_) => "gradcheck",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes at offset 0")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },
    #[error("header checksum mismatch (bytes 0..{0})")]
    Header(u64),
    #[error("payload chunk {chunk} corrupt at byte offsets {start}..{end}")]
    Corrupt { chunk: u64, start: u64, end: u64 },
    #[error("{0} trailing bytes after payload")]
    Trailing(u64),
    #[error("payload does not decode: {0}")]
    Payload(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, msg: impl ToString) -> Error {
    Error::Format {
        path: path.into(),
        msg: msg.to_string(),
    }
}
