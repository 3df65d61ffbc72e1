use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty attention support")]
    EmptySupport,
    #[error("rank-deficient; supply λ>0")]
    RankDeficient,
    #[error("undefined cosine")]
    UndefinedCosine,
    #[error("zero variance")]
    ZeroVariance,
    #[error("no variance")]
    NoVariance,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("task error: {0}")]
    Task(String),
    #[error("intervention plan error: {0}")]
    Plan(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("full FV ineffective")]
    FullFvIneffective,
    #[error("theorem hypothesis unmet: prediction error {0} is not better than chance")]
    HypothesisUnmet(f64),
    #[error("checkpoint error at byte offset {offset}: {msg}")]
    Checkpoint { offset: usize, msg: String },
    #[error("checkpoint version mismatch: file has version {found}, reader expects {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("config error in field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

