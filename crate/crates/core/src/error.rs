use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("row {row}: unknown label token {token:?}; accepted tokens: {accepted}")]
    UnknownLabel {
        row: usize,
        token: String,
        accepted: String,
    },

    #[error("row {row}: conflicting labels for user {user_id:?} on post {post_id:?} (set dedup = \"keep-last\" to override)")]
    ConflictingDuplicate {
        row: usize,
        user_id: String,
        post_id: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid attribute: {0}")]
    InvalidAttribute(String),

    #[error("embedding for post {post_id:?} has dimension {actual}, expected {expected}")]
    EmbeddingDimension {
        post_id: String,
        expected: usize,
        actual: usize,
    },

    #[error("duplicate post id {0:?} in embedding file")]
    DuplicateEmbedding(String),

    #[error("line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("split requires at least 3 posts, got {0}")]
    TooFewPosts(usize),

    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),

    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value at epoch {epoch} during {stage}; try lowering the learning rate (currently {learning_rate})")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        learning_rate: f64,
    },

    #[error("singular value decomposition did not converge")]
    SvdNonConvergence,

    #[error("feature dimension mismatch: expected {expected}, got {actual}")]
    FeatureDimension { expected: usize, actual: usize },

    #[error("no annotations in the {0} split")]
    EmptySplit(&'static str),

    #[error("missing text embedding for post {0:?}")]
    MissingEmbedding(String),

    #[error("unknown {kind} {name:?}")]
    Unknown { kind: &'static str, name: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
