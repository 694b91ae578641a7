use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("geometry error: image {height}x{width} is not divisible by block size {patch}")]
    Geometry {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("index error: {what} {index} out of range [0, {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error in {path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short category label, also used to pick the CLI exit code.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Geometry { .. } => "geometry",
            Error::Parameter(_) => "parameter",
            Error::Index { .. } => "index",
            Error::State(_) => "state",
            Error::Contract(_) => "contract",
            Error::Format { .. } => "format",
            Error::Divergence { .. } => "divergence",
            Error::Config(_) | Error::Json(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Parameter(_) | Error::Config(_) | Error::Json(_) => 2,
            Error::Io { .. } => 3,
            Error::Format { .. } => 4,
            Error::Dimension { .. } | Error::Geometry { .. } | Error::Index { .. } => 5,
            Error::State(_) | Error::Contract(_) => 6,
            Error::Divergence { .. } => 7,
        }
    }
}
