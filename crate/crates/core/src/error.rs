use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which side of a metric comparison was empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptySide {
    Pred,
    Truth,
    Both,
}

impl std::fmt::Display for EmptySide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmptySide::Pred => "prediction",
            EmptySide::Truth => "ground truth",
            EmptySide::Both => "prediction and ground truth",
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("tape state error: {0}")]
    TapeState(String),

    #[error("metric undefined: {0} mask is empty")]
    UndefinedMetric(EmptySide),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("configuration error: {field}: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
