//! Raw HU head CT → skull-stripped, template-aligned, [0, 1] volume.

mod intensity;
mod mask;
mod pipeline;
mod register;

pub use intensity::{to_nonnegative, IntensityMap, IntensityMode};
pub use mask::{dice, extract_brain, BrainMask, BrainParams};
pub use pipeline::{desk_template, percentile, run_pipeline, PrepConfig, Preprocessed, QcRecord};
pub use register::{
    register_affine, warp, AffineTransform, Metric, Registration, RegistrationOptions, RegistrationReport, TransformKind,
};

use crate::volio::{IntensityUnit, VolioError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("expected a {expected:?} volume, got {actual:?}")]
    UnitMismatch { expected: IntensityUnit, actual: IntensityUnit },
    #[error("no voxel inside the tissue window")]
    EmptyMask,
    #[error("degenerate registration input: {0}")]
    DegenerateInput(String),
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid preprocessing configuration: {0}")]
    ConfigInvalid(String),
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<PrepError> },
    #[error(transparent)]
    Volio(#[from] VolioError),
}

pub type Result<T> = std::result::Result<T, PrepError>;
