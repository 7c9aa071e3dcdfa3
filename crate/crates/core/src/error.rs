use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("alignment error in sequence {id}: {detail}")]
    Alignment { id: String, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("gradient probe error: {0}")]
    Probe(String),

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("blob format error: {0}")]
    Format(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("refusing to write into non-empty directory {0} (use --force)")]
    OutputExists(PathBuf),

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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Process exit code for the command line: 2 for bad inputs, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::NonFiniteGradient { .. } | Error::Probe(_) => 3,
            Error::Generation(_) => 3,
            _ => 2,
        }
    }
}
