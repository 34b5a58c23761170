use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("singular system: pivot {pivot:e} at column {column} is below tolerance")]
    Singular { column: usize, pivot: f64 },

    #[error("task {task} has a numerically zero gradient")]
    ZeroGradient { task: usize },

    #[error("task {task} has nonpositive loss {loss}")]
    NonPositiveLoss { task: usize, loss: f64 },

    #[error("non-finite loss for task {task}")]
    NonFiniteLoss { task: usize },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("baseline value of task `{task}` metric `{metric}` is zero")]
    ZeroBaseline { task: String, metric: String },

    #[error("idx format: {0}")]
    Idx(String),

    #[error("config: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
