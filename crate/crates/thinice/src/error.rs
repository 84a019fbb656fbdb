//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor was requested or produced with an impossible shape.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Operand shapes do not compose.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A class label fell outside `[0, classes)`.
    #[error("invalid label: {0}")]
    InvalidLabel(String),

    /// An operation produced NaN/Inf, or an optimizer diverged.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Autodiff contract violation (non-scalar loss, double backward,
    /// gradient requested off-tape).
    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// Operation not defined for these inputs (e.g. DLR loss with < 3 classes).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Configuration rejected; `pointer` is a JSON pointer to the offending key.
    #[error("config error at `{pointer}`: {message}")]
    Config { pointer: String, message: String },

    /// Checkpoint directory missing, corrupt, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A pipeline stage aborted; the stage name travels with the cause.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    pub fn stage(stage: impl Into<String>, source: Error) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(source),
        }
    }

    /// CLI exit code: 0 success, 2 config error, 3 stage failure, 4 numeric error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Numeric(_) => 4,
            Error::Stage { source, .. } => match source.as_ref() {
                Error::Numeric(_) => 4,
                _ => 3,
            },
            _ => 3,
        }
    }
}
