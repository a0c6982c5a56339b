use std::path::PathBuf;

use crate::model::{JobId, ResourceVector};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown job {0}")]
    UnknownJob(JobId),

    #[error("unknown job type {0}")]
    UnknownJobType(usize),

    #[error("job {job} is not active in slot {slot}")]
    InactiveJob { job: JobId, slot: u64 },

    #[error("invalid job: {0}")]
    InvalidJob(String),

    #[error("capacity violated: used {used} exceeds capacity {capacity}")]
    CapacityViolation { used: ResourceVector, capacity: ResourceVector },

    #[error("job type {type_id} does not fit the encoding (L = {types})")]
    TypeOutOfRange { type_id: usize, types: usize },

    #[error("{jobs} concurrent jobs exceed the encoding window J = {window}")]
    TooManyJobs { jobs: usize, window: usize },

    #[error("action index {index} out of range for J = {window} (max {max})", max = 3 * window)]
    ActionOutOfRange { index: usize, window: usize },

    #[error("inference produced non-finite probabilities")]
    NonFiniteProbabilities,

    #[error("non-finite value in layer {layer}")]
    Numerical { layer: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("allocation is not replayable: {0}")]
    Replay(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownConfigKeys(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
