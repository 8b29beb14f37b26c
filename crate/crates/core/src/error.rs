use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("too many malformed lines ({count} > {max}); first offending lines: {lines:?}")]
    MalformedInput {
        count: usize,
        max: usize,
        lines: Vec<usize>,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("empty vocabulary after applying min_count={0}")]
    EmptyVocabulary(usize),
    #[error("no test sequences: nothing to evaluate")]
    NoTestSequences,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("graph too large for dense diagnostics: {nodes} nodes > cap {cap}")]
    GraphTooLarge { nodes: usize, cap: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-parsable code used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::MalformedInput { .. } => "E_MALFORMED",
            Error::Parse(_) => "E_PARSE",
            Error::EmptyVocabulary(_) => "E_EMPTY_VOCAB",
            Error::NoTestSequences => "E_NO_TEST",
            Error::Shape(_) => "E_SHAPE",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::Config(_) => "E_CONFIG",
            Error::GraphTooLarge { .. } => "E_GRAPH_TOO_LARGE",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Diverged(_) => "E_DIVERGED",
            Error::InvalidArgument(_) => "E_ARG",
        }
    }
}
