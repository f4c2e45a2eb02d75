use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("scene file {0} contains no observations")]
    EmptyScene(PathBuf),

    #[error("unknown scenario `{0}` (expected crossing, approach_diverge, parallel, random_walk or distance_gated)")]
    UnknownScenario(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("step {step} exceeds the maximum horizon {max}")]
    HorizonExceeded { step: usize, max: usize },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("training diverged: {term} is not finite at step {step}")]
    Divergence { term: String, step: usize },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("missing scene directory {0}")]
    MissingScene(PathBuf),

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("dump: {0}")]
    Dump(String),

    #[error("plot: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short category name used by the command line for exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse { .. } | Error::EmptyScene(_) => "data",
            Error::UnknownScenario(_) | Error::InvalidScenario(_) => "scenario",
            Error::Shape(_) | Error::HorizonExceeded { .. } => "shape",
            Error::Autodiff(_) => "autodiff",
            Error::Divergence { .. } => "divergence",
            Error::CheckpointVersion { .. }
            | Error::CorruptCheckpoint(_)
            | Error::ConfigMismatch(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::MissingScene(_) | Error::EmptyDataset(_) => "dataset",
            Error::Dump(_) | Error::Csv(_) => "dump",
            Error::Plot(_) => "plot",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
