use std::path::PathBuf;

/// Errors produced anywhere in the decoding pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unknown subject {id} (model knows {n_subjects} subjects)")]
    SubjectUnknown { id: usize, n_subjects: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("signal too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },

    #[error("non-finite loss {loss} at step {step} (lr {lr:e}); recent losses {history:?}")]
    NonFiniteLoss {
        step: u64,
        lr: f64,
        loss: f64,
        history: Vec<f64>,
    },

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
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
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
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
