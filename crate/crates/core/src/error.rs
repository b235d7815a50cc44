use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("target track is missing or does not cover the full time grid")]
    MissingTarget,
    #[error("time grid is empty: both observation and future horizons must be positive")]
    EmptyGrid,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("non-numeric coordinate at line {line}")]
    NonNumericCoordinate { line: usize },
    #[error("duplicate (frame, agent) record at line {line}")]
    DuplicateRecord { line: usize },
    #[error("unknown subset `{0}`")]
    UnknownSubset(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("softmax over a fully masked row")]
    AllMasked,
    #[error("requested top-{k} modes but the mixture has only {m}")]
    KExceedsM { k: usize, m: usize },
    #[error("training diverged at epoch {epoch} (loss = {value})")]
    Divergence { epoch: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
