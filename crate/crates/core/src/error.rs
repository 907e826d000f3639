use std::path::PathBuf;

/// Errors raised by the reward toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("caption is empty after tokenization: {raw:?}")]
    EmptyCaption { raw: String },

    #[error("duplicate image id {0:?}")]
    DuplicateId(String),

    #[error("image {0:?} has an empty reference list")]
    EmptyReferences(String),

    #[error("image {id:?} has invalid split {split:?} (expected train, val or test)")]
    InvalidSplit { id: String, split: String },

    #[error("corpus contains no images")]
    EmptyCorpus,

    #[error("malformed dataset JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}, line {line}: {message}")]
    Parse {
        context: String,
        line: usize,
        message: String,
    },

    #[error("image {0:?} is not in the corpus")]
    UnknownImage(String),

    #[error("no embedding for image {0:?}")]
    MissingEmbedding(String),

    #[error("no nearest-neighbor entry for image {0:?}")]
    MissingNeighbor(String),

    #[error("vector for {id:?} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        got: usize,
    },

    #[error("vector for {0:?} contains a non-finite value")]
    NonFiniteVector(String),

    #[error("nearest-neighbor search needs at least 2 images, got {0}")]
    InsufficientImages(usize),

    #[error("hard-negative mining needs at least 2 distinct images in the batch, got {0}")]
    InsufficientBatch(usize),

    #[error("reward trace length {got} does not fit the rollout ({expected} steps, max {max})")]
    TraceLength {
        expected: usize,
        got: usize,
        max: usize,
    },

    #[error("token {0:?} is not in the policy vocabulary")]
    UnknownToken(String),

    #[error("non-finite gradient at epoch {epoch}, step {step} (objective {objective})")]
    NonFiniteGradient {
        epoch: usize,
        step: usize,
        objective: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("run failed for {label} with seed {seed}: {source}")]
    RunFailed {
        label: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable snake-case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyCaption { .. } => "empty_caption",
            Error::DuplicateId(_) => "duplicate_id",
            Error::EmptyReferences(_) => "empty_references",
            Error::InvalidSplit { .. } => "invalid_split",
            Error::EmptyCorpus => "empty_corpus",
            Error::Json(_) => "json",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::UnknownImage(_) => "unknown_image",
            Error::MissingEmbedding(_) => "missing_embedding",
            Error::MissingNeighbor(_) => "missing_neighbor",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFiniteVector(_) => "non_finite_vector",
            Error::InsufficientImages(_) => "insufficient_images",
            Error::InsufficientBatch(_) => "insufficient_batch",
            Error::TraceLength { .. } => "trace_length",
            Error::UnknownToken(_) => "unknown_token",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::InvalidConfig(_) => "invalid_config",
            Error::RunFailed { .. } => "run_failed",
        }
    }

    /// I/O failure on `path`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            line,
            message: message.into(),
        }
    }
}
