use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A point on or outside the ball boundary was passed where an interior
    /// point is required.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate hyperplane: orientation has zero norm")]
    DegenerateHyperplane,

    #[error("unknown node: {0}")]
    Lookup(String),

    #[error("taxonomy structure: {0}")]
    Structural(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("schedule: {0}")]
    Schedule(String),

    #[error("training: {0}")]
    Training(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("data: {0}")]
    Data(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("excluded class: {0}")]
    ExcludedClass(String),

    #[error("duplicate parameters for node {0}")]
    Duplicate(String),

    #[error("incompatible runs: {0}")]
    Incompatible(String),

    #[error("format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
