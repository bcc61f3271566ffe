use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("event {index} at ({x}, {y}) lies outside the {width}x{height} sensor")]
    EventOutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },

    #[error("events are not sorted by timestamp (index {0})")]
    UnsortedEvents(usize),

    #[error("non-finite values produced at stage `{0}`")]
    NonFinite(&'static str),

    #[error("malformed {format} data: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },

    #[error("checkpoint parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::EventOutOfBounds { .. } => "event_out_of_bounds",
            Error::UnsortedEvents(_) => "unsorted_events",
            Error::NonFinite(_) => "non_finite",
            Error::Format { .. } => "format",
            Error::ParamMismatch(_) => "param_mismatch",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        // a bound, so NaN fails it
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
