//! Two-phase transfer training with focal loss, augmentation, callbacks
//! and checkpoints.

mod augment;
mod callbacks;
mod checkpoint;
mod fit;
mod loss;
mod optim;

pub use augment::{augment_sample, elastic_field, mirror, AugConfig, AugDraw, ElasticConfig};
pub use callbacks::{
    early_stop_epoch, plateau_schedule, EarlyStopConfig, EarlyStopping, Monitor, PlateauConfig, PlateauLr,
};
pub use checkpoint::{blob_path, AdamState, Checkpoint, CheckpointMeta, DType, EntryRole, Manifest, TensorEntry};
pub use fit::{
    derive_seed, fit, fit_observed, predict, volume_input, stratified_split, CheckpointConfig, Dataset, EpochRecord, FitOutcome, History, Sample,
    Snapshot, TrainConfig, INPUT_WINDOW_HU,
};
pub use loss::{compute_class_weights, focal_loss, focal_loss_value, ClassWeightMode, P_MIN};
pub use optim::{Adam, AdamConfig, Moments};

use crate::eval::EvalError;
use crate::net::NetError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("class {0} has no samples")]
    MissingClass(usize),
    #[error("{split} set has no samples of class {class}")]
    EmptyClass { split: &'static str, class: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown monitor '{0}' (expected val_loss, val_auc, val_f1, val_accuracy or train_loss)")]
    UnknownMonitor(String),
    #[error("invalid training configuration: {0}")]
    ConfigInvalid(String),
    #[error("corrupt checkpoint manifest: {0}")]
    ManifestCorrupt(String),
    #[error("checkpoint blob holds {actual} bytes, manifest expects {expected}")]
    BlobLengthMismatch { expected: u64, actual: u64 },
    #[error("unknown tensor name '{0}'")]
    UnknownTensorName(String),
    #[error("non-finite training loss in epoch {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;
