use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("cannot ingest `{id}`: {message}")]
    Ingest { id: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("could not sample a split covering every class after {attempts} attempts; uncovered classes: {uncovered:?}")]
    Sampling { attempts: usize, uncovered: Vec<usize> },

    #[error("numerical abort at iteration {iteration}: {message} (batch ids: {batch_ids:?})")]
    Numerical { iteration: usize, message: String, batch_ids: Vec<String> },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stop-gradient audit failed: {0}")]
    Audit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn ingest(id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Ingest { id: id.into(), message: message.into() }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Ingest { .. } | Error::Data(_) | Error::Sampling { .. } | Error::Image(_) => 3,
            Error::Numerical { .. } => 4,
            _ => 1,
        }
    }
}
