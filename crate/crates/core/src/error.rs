use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("sequence has no valid tokens")]
    EmptySequence,

    #[error("token id {id} at position {position} is outside the vocabulary of size {vocab_size}")]
    Vocabulary {
        id: usize,
        position: usize,
        vocab_size: usize,
    },

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("task spec error: {0}")]
    Spec(String),

    #[error("sequence of length {length} exceeds the cap of {cap}")]
    Length { length: usize, cap: usize },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFinite(String),

    #[error("ablation grid error: {0}")]
    Grid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::NonFinite(_))
    }
}
