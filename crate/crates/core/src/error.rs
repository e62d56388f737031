use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value is outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("track generation failed after {attempts} attempts: {reason}")]
    TrackGeneration { attempts: usize, reason: String },

    #[error("expert abstained: vehicle is {offset:.3} m off the centerline")]
    ExpertAbstain { offset: f64 },

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("study step `{step}` failed: {source}")]
    Study {
        step: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_step(self, step: &str) -> Self {
        Error::Study {
            step: step.to_string(),
            source: Box::new(self),
        }
    }
}
