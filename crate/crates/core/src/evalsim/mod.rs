//! Synthetic sequences and one-pass evaluation.

pub mod metrics;
pub mod sequence;
pub mod synthetic;

pub use metrics::{center_error, iou, ope_metrics, LengthMismatch, OpeMetrics};
pub use sequence::{format_groundtruth, parse_groundtruth, FrameFormat, Sequence, SequenceManifest};
pub use synthetic::{generate_sequence, Occlusion, SyntheticConfig};

use crate::numerics::{FormatError, TensorError};
use crate::pipeline::PipelineError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Format(#[from] FormatError),
}
