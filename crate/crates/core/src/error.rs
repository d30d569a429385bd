use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("masked mean pool over an all-false mask")]
    EmptyPool,

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("ingestion error in {path}: {msg}")]
    Ingestion { path: String, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: ce={ce}, wcl={wcl}, mixed={mixed}")]
    Diverged {
        epoch: usize,
        batch: usize,
        ce: f64,
        wcl: f64,
        mixed: f64,
    },

    #[error("{context}: {source}")]
    Annotated {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn ingestion(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn annotate(self, context: impl Into<String>) -> Self {
        Error::Annotated {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by invalid user input rather than a failure at run time.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } | Error::Ingestion { .. } => true,
            Error::Annotated { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
