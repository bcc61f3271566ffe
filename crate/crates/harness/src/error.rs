use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] evlight_core::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at step {step}; last good checkpoint: {}", last_checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string()))]
    Diverged {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(e) => e.kind(),
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// `{"error": {"kind": ..., "message": ...}}`
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
    }
}

macro_rules! config_ensure {
    ($cond:expr, $($fmt:tt)+) => {
        // a bound, so NaN fails it
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::Error::Config(format!($($fmt)+)));
        }
    };
}
pub(crate) use config_ensure;
