use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible matching: {segments} segments for {queries} queries")]
    InfeasibleMatching { queries: usize, segments: usize },
    #[error("dataset generation failed for image {index}: {reason}")]
    Generation { index: usize, reason: String },
    #[error("missing loss component `{0}`")]
    MissingComponent(&'static str),
    #[error("stage {stage} output missing at {path}; run stage{stage} first")]
    MissingStage { stage: u8, path: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
