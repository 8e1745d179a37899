use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AdeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AdeError {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("data error at position {position}: {reason}")]
    Data { position: usize, reason: String },

    #[error("{0}")]
    Usage(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite loss {loss} at step {step} (lr {lr})")]
    NonFinite { step: u64, lr: f64, loss: f64 },

    #[error("checkpoint integrity failure: expected hash {expected}, found {actual}")]
    Integrity { expected: String, actual: String },

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<AdeError>,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AdeError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        AdeError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        AdeError::Usage(msg.into())
    }

    /// Wraps `self` with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        AdeError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AdeError::Io {
            path: path.into(),
            source,
        }
    }
}
