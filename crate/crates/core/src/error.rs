use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Parameters that can never produce a valid result (infeasible mask
    /// budgets, odd/even violations, out-of-range hyperparameters).
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite activation in cascade {cascade}")]
    Divergence { cascade: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    TrainingDiverged { epoch: usize, step: usize, loss: f64 },

    #[error("malformed container {path}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("missing grid cells: {0:?}")]
    MissingCells(Vec<(String, String)>),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied parameters rather than
    /// runtime failures. The CLI maps these to a distinct exit code.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidInput(_))
    }
}
