use std::path::PathBuf;

use numcore::NumError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("config: {0}")]
    Config(String),
    #[error("vocab hash mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("config hash mismatch: checkpoint has {found}, config gives {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite {term} loss ({value}) at step {step}: {dump}")]
    NonFinite {
        term: &'static str,
        value: f64,
        step: u64,
        dump: String,
    },
    #[error(transparent)]
    Num(#[from] NumError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
