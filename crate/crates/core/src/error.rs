use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// All violations found while validating a config, in document order.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    ConfigList(Vec<String>),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("numerical instability at step {step} (t = {time})")]
    Instability { step: usize, time: f64 },

    #[error("trajectory {index} failed: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("step size underflow at t = {time} (stiff dynamics)")]
    Stiffness { time: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("failed to load {}: {message} (byte offset {offset})", .path.display())]
    Load {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("refusing to overwrite existing run directory {}", .0.display())]
    OutputExists(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding failed: {0}")]
    Image(String),
}

impl Error {
    /// Numerical failures (NaN, blow-up, stiffness) as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Trajectory { source, .. } => source.is_numerical(),
            Error::Instability { .. } | Error::Divergence { .. } | Error::Stiffness { .. } => true,
            _ => false,
        }
    }
}
