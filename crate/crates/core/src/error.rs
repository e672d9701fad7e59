use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: malformed line {content:?}")]
    MalformedLine { line: usize, content: String },

    #[error("line {line}: invalid tag {tag:?}")]
    InvalidTag { line: usize, tag: String },

    #[error("line {line}: BIO2 violation, {tag} has no valid predecessor")]
    Bio2Violation { line: usize, tag: String },

    #[error("invalid tag sequence: {0}")]
    InvalidSequence(String),

    #[error("invalid span: {0}")]
    InvalidSpan(String),

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported {what} version {found} (this build reads version {supported})")]
    Version {
        what: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("sentence {id}: {tokens} text tokens plus separator exceed max length {max}")]
    TooLong { id: String, tokens: usize, max: usize },

    #[error("engine error: {0}")]
    Engine(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
