use numkit::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid model state: {0}")]
    State(String),
    #[error("least-squares fit failed for block {block}: {reason}")]
    Fit { block: usize, reason: String },
    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },
    #[error("sandwich planning failed: {0}")]
    Planning(String),
    #[error("budget infeasible: {0}")]
    Budget(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("format version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),
    #[error("checkpoint blob too short: {0}")]
    Size(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("pipeline stage {stage} (block {block}) failed: {source}")]
    Stage {
        stage: usize,
        block: usize,
        /// Manifest of the stages completed before the failure; pass it back
        /// to resume.
        completed: Box<crate::manifest::PrunedModelManifest>,
        source: Box<Error>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
