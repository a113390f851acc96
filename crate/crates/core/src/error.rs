use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload shorter than header declares: tensor `{name}` ends at byte {end}, payload has {available}")]
    Truncated { name: String, end: u64, available: u64 },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor `{name}`: non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error("invalid model config: {0}")]
    InvalidModelConfig(String),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("layer {layer} out of range ({n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("unit {unit} out of range in layer {layer} ({d_ff} units)")]
    UnitOutOfRange { layer: usize, unit: usize, d_ff: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("requested {k} singular vectors but at most {max} exist")]
    RankTooLarge { k: usize, max: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("no candidate exceeds threshold tau = {tau} (mean {mean}, std {std}); lower alpha_sel")]
    EmptySelection { tau: f64, mean: f64, std: f64 },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("pair {index}: {source}")]
    Pair {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) | Error::Io { .. } => ErrorKind::Config,
            Error::RankTooLarge { .. } | Error::Degenerate(_) | Error::EmptySelection { .. } => {
                ErrorKind::Numeric
            }
            Error::Pair { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}
