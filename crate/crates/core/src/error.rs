use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown architecture `{got}`; valid ids: {valid}")]
    UnknownArch { got: String, valid: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("load error in {path}: {msg}")]
    Load { path: PathBuf, msg: String },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("no batch-norm layers in model")]
    NoBatchNorm,

    #[error("empty set not serializable")]
    EmptySet,

    #[error("empty pool")]
    EmptyPool,

    #[error("class coverage mismatch; missing classes: {0:?}")]
    Coverage(Vec<i64>),

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Torch(#[from] tch::TchError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
