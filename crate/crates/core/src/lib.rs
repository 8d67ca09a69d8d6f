//! Toolkit for mortality prediction from subarachnoid-hemorrhage head CT:
//! NIfTI ingestion, preprocessing, a small reverse-mode autodiff engine,
//! DenseNet classifiers with metadata fusion, focal-loss training,
//! Grad-CAM saliency and evaluation statistics.

// `!(a < b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Headers are built field by field, mirroring their on-disk layout.
#![allow(clippy::field_reassign_with_default)]
// Numeric kernels index several buffers in lockstep.
#![allow(clippy::needless_range_loop)]

pub mod volio;
pub mod prep;
pub mod tensor;
pub mod net;
pub mod train;
pub mod eval;
pub mod explain;
pub mod synth;
