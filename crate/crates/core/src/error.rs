use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kinematics: {0}")]
    InvalidKinematics(String),

    #[error("episode finished")]
    EpisodeFinished,

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("meta-batch empty")]
    MetaBatchEmpty,

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
