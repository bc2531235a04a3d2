use std::path::PathBuf;

use cmivtp_numerics::NumericsError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("window: track of length {len} cannot hold {t_obs} observed + {t_fut} future steps")]
    Window { len: usize, t_obs: usize, t_fut: usize },

    #[error("line {line}: field `{field}`: {msg}")]
    Parse {
        line: usize,
        field: String,
        msg: String,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("homography: {0}")]
    Homography(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("checkpoint tensor `{name}`: {msg}")]
    Schema { name: String, msg: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, field: &str, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            field: field.to_string(),
            msg: msg.into(),
        }
    }
}
