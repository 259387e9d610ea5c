use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} out of range: {index} (limit {limit})")]
    Range {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("shape mismatch for {name}: expected {expected:?}, got {actual:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("steering specification error: {0}")]
    Spec(String),

    #[error("steering csv format error{}: {message}", row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    Format { row: Option<usize>, message: String },

    #[error("failed to load {path}: field `{field}`: {message}")]
    Load {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("data error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { line: Option<usize>, message: String },

    #[error("description fetch failed for latents {missing:?}: {message}")]
    Fetch { missing: Vec<usize>, message: String },

    #[error("failed to decode remote payload: {0}")]
    Decode(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn shape(name: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            name: name.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
