use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid timestep {t} (valid range {lo}..={hi})")]
    InvalidTimestep { t: usize, lo: usize, hi: usize },

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("every row is masked out")]
    AllMasked,

    #[error("evidence mask is empty")]
    EmptyMask,

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("gaussian set is empty")]
    EmptySet,

    #[error("image too small for SSIM: {width}x{height} (need at least 11x11)")]
    TooSmall { width: usize, height: usize },

    #[error("need at least {needed} views, got {got}")]
    InsufficientViews { needed: usize, got: usize },

    #[error("fit diverged at iteration {0} (non-finite loss)")]
    DivergedFit(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Broad failure class, used by the CLI to choose an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } | Error::Format { .. } => ErrorKind::Io,
            Error::Config(_) | Error::InvalidRange(_) | Error::InsufficientViews { .. } => {
                ErrorKind::Config
            }
            _ => ErrorKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Numeric,
}
