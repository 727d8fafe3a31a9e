//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown dataset id `{0}`")]
    UnknownDataset(String),

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("ingestion error in `{file}`: {reason}")]
    Ingestion { file: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("missing trigger for target class {0}")]
    MissingTrigger(usize),

    #[error("non-finite loss at {stage}: clean={clean} trojan={trojan}")]
    NonFiniteLoss {
        stage: String,
        clean: f64,
        trojan: f64,
    },

    #[error("{stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric verification failed: {0}")]
    VerifyMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
