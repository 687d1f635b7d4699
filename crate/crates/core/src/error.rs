use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Arg(String),

    /// Text input that failed to parse; `line` and `column` are 1-based.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("numeric error{}: {message}", pixel.map(|(x, y)| format!(" at pixel ({x}, {y})")).unwrap_or_default())]
    Numeric {
        message: String,
        pixel: Option<(usize, usize)>,
    },

    #[error("missing modality: {0}")]
    MissingModality(&'static str),

    #[error("singular normal equations: {0}")]
    Singular(String),

    #[error("optimization diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric {
            message: message.into(),
            pixel: None,
        }
    }
}
