use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Parse failures of the binary tensor format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    BadMagic,
    BadVersion,
    BadDType,
    BadHeader,
    TruncatedPayload,
    TrailingBytes,
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ParseErrorKind::BadMagic => "bad magic",
            ParseErrorKind::BadVersion => "unsupported version",
            ParseErrorKind::BadDType => "bad dtype code",
            ParseErrorKind::BadHeader => "bad header",
            ParseErrorKind::TruncatedPayload => "truncated payload",
            ParseErrorKind::TrailingBytes => "trailing bytes after payload",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("crop out of bounds on axis {axis}: offset {offset} + size {size} > dim {dim}")]
    Bounds {
        axis: usize,
        offset: usize,
        size: usize,
        dim: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("tensor parse error: {kind}")]
    Parse { kind: ParseErrorKind },

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("rank deficient: effective rank {effective_rank} < requested {requested} components")]
    RankDeficient {
        effective_rank: usize,
        requested: usize,
    },

    #[error("bundle version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("dim inconsistency: {0}")]
    DimInconsistency(String),

    #[error("non-finite value in {layer} output")]
    NonFinite { layer: &'static str },

    #[error("missing cache: {0}")]
    MissingCache(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Stable machine-parsable category, used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Bounds { .. } | Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Parse { .. } | Error::Manifest { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::RankDeficient { .. } => "numeric",
            Error::VersionMismatch { .. } => "version",
            Error::DimInconsistency(_) => "dim_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::MissingCache(_) => "internal",
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                "missing_file"
            }
            Error::Io { .. } => "io",
        }
    }
}
