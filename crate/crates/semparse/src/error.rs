use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    #[error("unknown function `{name}` with {arity} argument(s) at byte {pos}")]
    UnknownFunction {
        name: String,
        arity: usize,
        pos: usize,
    },

    #[error("type mismatch at byte {pos}: {msg}")]
    TypeMismatch { pos: usize, msg: String },

    #[error("ambiguous form at byte {pos}: {msg}")]
    Ambiguous { pos: usize, msg: String },

    #[error("bare constant at byte {pos}: a quoted literal needs a typed context")]
    BareConstant { pos: usize },

    #[error("invalid semantic unit: {0}")]
    InvalidUnit(String),

    #[error("{path}:{line}: {msg}")]
    Corpus {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("insufficient instances for language `{language}`: found {found}, need {need}")]
    InsufficientInstances {
        language: String,
        found: usize,
        need: usize,
    },

    #[error("rank {rank} out of range [1, {max}]")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("model version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("model file: {0}")]
    ModelFormat(#[from] serde_json::Error),
}
