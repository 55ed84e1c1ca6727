//! Data ingestion, augmentation, patchification and low-resolution views.

pub mod augment;
mod dataset;
pub mod formats;
mod image;
pub mod synthetic;

pub use augment::{horizontal_flip, random_resized_crop, sample_crop_rect, CropRect};
pub use dataset::{load_dataset, DataFormat, Dataset, NormStats};
pub use image::{
    make_lr_view, make_lr_view_var, patchify, patchify_var, resize_nearest, unpatchify, ImageBatch,
    PatchSequence,
};
pub use synthetic::{synthetic_digits, DigitStyle};
