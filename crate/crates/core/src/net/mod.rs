//! DenseNet classifiers for 2D slices or 3D volumes with optional late
//! fusion of clinical metadata.

mod config;
mod metadata;
mod model;

pub use config::{ChannelPlan, DenseNetConfig, Stage};
pub use metadata::{FieldEncoding, MetadataField, MetadataSpec, Standardizer};
pub use model::{Bound, Forward, ForwardOptions, LayerKind, Model, NamedTensor, ParamPartition, TensorRole};

use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network configuration: {0}")]
    ConfigInvalid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial extent {0:?} is too small for a transition layer")]
    SpatialTooSmall(Vec<usize>),
    #[error("model is fused with metadata but no metadata was supplied")]
    MetadataMissing,
    #[error("metadata supplied to a model without a metadata head")]
    MetadataUnexpected,
    #[error("model is already fused with metadata")]
    AlreadyFused,
    #[error("unknown tensor name '{0}'")]
    UnknownTensorName(String),
    #[error("metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetError>;
