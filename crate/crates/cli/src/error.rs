use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Config { path: PathBuf, msg: String },
    /// A core failure tied to the file that triggered it.
    #[error("{path}: {source}")]
    Input {
        path: PathBuf,
        #[source]
        source: epigraph::Error,
    },
    #[error(transparent)]
    Core(#[from] epigraph::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn input(path: &Path, source: epigraph::Error) -> Self {
        CliError::Input {
            path: path.to_path_buf(),
            source,
        }
    }
}
