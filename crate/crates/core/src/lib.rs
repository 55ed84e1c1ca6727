//! Super-resolution masked autoencoders at desk scale.
//!
//! Masked image modeling where the hidden patches are not dropped but
//! replaced by their low-resolution counterparts: the encoder sees only the
//! visible full-resolution patches, and a convolutional + transformer
//! prediction head restores full resolution at the masked positions.
//!
//! Layout:
//! - [`tensor`]: dense tensors and a reverse-mode autodiff tape.
//! - [`data`]: dataset formats, augmentation, patchify, low-resolution views.
//! - [`masking`]: random patch masks and the split/splice bookkeeping.
//! - [`model`]: encoder, prediction head, losses, classification variant.
//! - [`train`]: AdamW, schedules, checkpoints, pretrain/finetune/eval loops.
//! - [`config`] and [`run`]: flat key=value configs and the job entry points.

// `!(x <= y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod masking;
pub mod model;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
