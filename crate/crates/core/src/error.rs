use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error in `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("training error at step {step}: {detail}")]
    Training { step: usize, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
