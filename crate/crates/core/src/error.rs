use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("object {object}: missing {modality} code")]
    MissingCode { object: String, modality: &'static str },
    #[error("unknown object {0}")]
    UnknownObject(String),
    #[error("unknown part {part:?}; available parts: {available:?}")]
    UnknownPart { part: String, available: Vec<String> },
    #[error("split would leave the {0} partition empty")]
    EmptyPartition(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("only {found} eligible distractors for seed {seed} (need 2)")]
    InsufficientDistractors { seed: String, found: usize },
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("empty utterance")]
    EmptyUtterance,
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("pretrained backbone weights not found at {path}: {hint}")]
    MissingBackbone { path: PathBuf, hint: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { location: location.into(), message: message.into() }
    }
}
