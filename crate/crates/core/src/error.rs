use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A file did not match its declared format.
    #[error("{}: parse error at {location}: {message}", path.display())]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    /// Inputs parsed but violate a domain invariant or disagree with each other.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {message}")]
    Pipeline { stage: String, message: String },

    #[error("stage `{stage}` needs the `{requires}` checkpoint; run `{requires}` first")]
    MissingCheckpoint { stage: String, requires: String },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("metric undefined: {0}")]
    Undefined(String),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn pipeline(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Pipeline {
            stage: stage.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 for bad inputs, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Validation(_) | Error::Config(_) => 2,
            _ => 3,
        }
    }
}
