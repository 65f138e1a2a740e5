use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported derivative order p={p}, q={q} (p+q must be at most {max})")]
    UnsupportedOrder { p: usize, q: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure in member {member} at layer {layer}: {detail}")]
    NonFinite {
        member: u64,
        layer: usize,
        detail: String,
    },

    #[error("flow error at step {step} (t = {t}): {detail}")]
    Flow { step: usize, t: f64, detail: String },

    #[error("retarded-domain error: requested t = {t} before s = {s}")]
    Retarded { t: f64, s: f64 },

    #[error("{0} unavailable: {1}")]
    Unavailable(&'static str, String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit status for this error: 2 for invalid input, 3 for a
    /// numeric failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnsupportedOrder { .. } | Error::Shape(_) => 2,
            Error::Domain(_) | Error::NonFinite { .. } | Error::Flow { .. } | Error::Retarded { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
