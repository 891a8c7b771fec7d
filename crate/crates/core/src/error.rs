use std::path::PathBuf;

use thiserror::Error;

use crate::wire::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("optimizer state error: {0}")]
    State(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    /// A client failed during a federated round; nothing was aggregated.
    #[error("round {round} aborted by client {client}: {source}")]
    Round {
        round: u32,
        client: u32,
        #[source]
        source: Box<Error>,
    },
    #[error("statistics error: {0}")]
    Stat(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
