//! Recurrent residual attention U-Net for binary segmentation of small,
//! sparse structures, with the Tversky loss family and a reverse-mode
//! differentiation engine verified against finite differences.
//!
//! Training runs in `f32`; every differentiable building block is generic
//! over [`Scalar`] so the same code can be checked in `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use conv::{ConvSpec, Padding};
pub use model::{ModelConfig, R2AUNet};
pub use tensor::num_like::Scalar;
pub use tensor::{Shape, Tensor};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("ingest error for sample `{id}`: {reason}")]
    Ingest { id: String, reason: String },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
