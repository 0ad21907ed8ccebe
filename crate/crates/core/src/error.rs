use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("action ({dx}, {dy}) exceeds the per-step bound {a_max}")]
    ActionTooLarge { dx: f64, dy: f64, a_max: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("rollout {rollout_id} is not an optimal in-workspace rollout: {reason}")]
    NonOptimalRollout { rollout_id: usize, reason: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("rollout set rejected: {0}")]
    InvalidRolloutSet(String),

    #[error("state index requires at least one state")]
    EmptyIndex,

    #[error("detector calibration requires at least 2 states, got {0}")]
    TooFewStates(usize),

    #[error("components disagree: {0}")]
    Mismatch(String),

    #[error("invalid user command: {0}")]
    InvalidCommand(String),

    #[error("session {0} not found")]
    SessionNotFound(u64),

    #[error("session {0} is closed")]
    SessionClosed(u64),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
