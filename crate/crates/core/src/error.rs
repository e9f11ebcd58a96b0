use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("temporal split needs at least 2 tokens in training mode, got {0}")]
    DegenerateLength(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("train step, stage {line} ({stage}): {source}")]
    Stage {
        line: u8,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True when the error stems from user configuration rather than runtime state.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::UnknownParameter(_) => true,
            Error::Json { .. } => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

/// Annotate an error with the training-step line it came from.
pub(crate) trait StageExt<T> {
    fn stage(self, line: u8, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, line: u8, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            line,
            stage,
            source: Box::new(e),
        })
    }
}
