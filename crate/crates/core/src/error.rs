use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("gradient unavailable for node {0}; was the graph recorded?")]
    GradientUnavailable(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("class {class} has {count} samples, fewer than k = {k}")]
    ClassTooSmall {
        class: &'static str,
        count: usize,
        k: usize,
    },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("checkpoint error at byte offset {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Divergence { epoch: usize },

    #[error("conjugate gradient did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
