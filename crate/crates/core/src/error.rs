use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("the unlabeled pool is empty")]
    EmptyPool,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numerical rank deficiency: {0}; add a positive ridge")]
    NumericalRank(String),
    #[error("cannot-link constraints unsatisfiable for point {point}")]
    Constraint { point: usize },
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
