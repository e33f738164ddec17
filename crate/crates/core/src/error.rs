use thiserror::Error;

#[derive(Debug, Error)]
pub enum GdiError {
    #[error("invalid environment: {0}")]
    InvalidEnv(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("state {0} is terminal")]
    TerminalState(usize),
    #[error("action {action} out of range (n_actions = {n_actions})")]
    ActionOutOfRange { action: usize, n_actions: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("zero behavior probability for the taken action at step {0}")]
    ZeroBehaviorProb(usize),
    #[error("no snapshot has been published")]
    NoSnapshot,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed score table: {0}")]
    ScoreTable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GdiError>;
