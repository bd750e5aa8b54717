use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is at or below the normalization epsilon")]
    ZeroNorm,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("gradient check failed for {param}[{index}]: analytic {analytic:e}, numeric {numeric:e}, relative error {rel_err:e}")]
    GradMismatch {
        param: String,
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_err: f64,
    },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("file truncated: needed {needed} bytes, found {found}")]
    TruncatedFile { needed: usize, found: usize },

    #[error("trailing data: {0} unexpected bytes after payload")]
    TrailingData(usize),

    #[error("bad format: {0}")]
    BadFormat(String),

    #[error("checkpoint entry mismatch: {0}")]
    UnknownEntry(String),

    #[error("metric requires both classes to be present")]
    SingleClass,

    #[error("metric requires at least one positive label")]
    NoPositives,

    #[error("no anomalous regions in the ground-truth masks")]
    NoRegions,

    #[error("invalid manifest: {0}")]
    ManifestInvalid(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Attaches the offending file path.
    pub fn at(self, path: impl Into<PathBuf>) -> Self {
        Error::Path {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// Strips path context to reach the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Path { source, .. } => source.root(),
            other => other,
        }
    }

    /// Whether this error means the inputs failed validation (as opposed to an
    /// environment failure such as an unreadable file).
    pub fn is_validation(&self) -> bool {
        !matches!(self.root(), Error::Io(_))
    }
}
