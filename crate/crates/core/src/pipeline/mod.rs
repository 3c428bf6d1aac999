//! Per-frame tracking: cropping, feature extraction, decoding, prediction,
//! window penalty and the hand-off to the appearance discriminator.

pub mod extractor;
pub mod geometry;
pub mod head;
pub mod tracker;
pub mod weights;

pub use extractor::{FeatureExtractor, ReferenceExtractor, REFERENCE_EXTRACTOR_ID};
pub use geometry::{context_side, crop_patch, crop_search, crop_square, BBox};
pub use head::{argmax, decode_box, encode_box, hann_window, predict, window_penalty, HeadWeights, Prediction};
pub use tracker::{FrameRecord, StageTimings, TrackState, Tracker, TrackerConfig, TrackerModel};
pub use weights::{shipped_desk_weights, ModelDims, ModelWeights, ReferenceParams, WeightBundle};

use crate::appearance::AppearanceError;
use crate::numerics::{FormatError, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Appearance(#[from] AppearanceError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid box {0:?}")]
    InvalidBox(BBox),
    #[error("tracker used before init")]
    NotInitialized,
    #[error("configuration: {0}")]
    Config(String),
}
