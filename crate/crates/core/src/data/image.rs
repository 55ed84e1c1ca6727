use crate::error::TensorError;
use crate::tensor::{kernels, Scalar, Tensor, Var};

/// A batch of `[B,C,H,W]` images with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub pixels: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor<f32>, labels: Option<Vec<usize>>) -> Result<Self, TensorError> {
        if pixels.rank() != 4 {
            return Err(TensorError::Shape {
                op: "image_batch",
                detail: format!("expected [B,C,H,W], got {:?}", pixels.shape()),
            });
        }
        if let Some(l) = &labels {
            if l.len() != pixels.shape()[0] {
                return Err(TensorError::Shape {
                    op: "image_batch",
                    detail: format!("{} labels for {} images", l.len(), pixels.shape()[0]),
                });
            }
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }
}

/// Non-overlapping patch tokens `[B,N,D]` with their grid geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence<T> {
    pub tokens: Tensor<T>,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub channels: usize,
}

impl<T: Scalar> PatchSequence<T> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.tokens.shape()[2]
    }
}

fn check_patch_geometry(shape: &[usize], p: usize) -> Result<(), TensorError> {
    if shape.len() != 4 {
        return Err(TensorError::Shape {
            op: "patchify",
            detail: format!("expected [B,C,H,W], got {shape:?}"),
        });
    }
    let (h, w) = (shape[2], shape[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(TensorError::config(
            "patchify",
            format!("image {h}x{w} (H={h}, W={w}) is not divisible by patch size P={p}"),
        ));
    }
    Ok(())
}

fn patch_axes(shape: &[usize], p: usize) -> ([usize; 6], usize, usize) {
    let [b, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let (rows, cols) = (h / p, w / p);
    ([b, c, rows, p, cols, p], rows, cols)
}

/// `[B,C,H,W]` → `[B,N,C·P·P]`, row-major over the patch grid. Token `i` is
/// the `(C,P,P)` block at grid cell `(i / cols, i % cols)`.
pub fn patchify<T: Scalar>(pixels: &Tensor<T>, p: usize) -> Result<PatchSequence<T>, TensorError> {
    check_patch_geometry(pixels.shape(), p)?;
    let (split, rows, cols) = patch_axes(pixels.shape(), p);
    let (b, c) = (split[0], split[1]);
    let t = kernels::permute(&pixels.reshape(&split)?, &[0, 2, 4, 1, 3, 5])?;
    Ok(PatchSequence {
        tokens: t.reshape(&[b, rows * cols, c * p * p])?,
        grid: (rows, cols),
        patch_size: p,
        channels: c,
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(seq: &PatchSequence<T>) -> Result<Tensor<T>, TensorError> {
    let (rows, cols) = seq.grid;
    let (p, c) = (seq.patch_size, seq.channels);
    let shape = seq.tokens.shape();
    if shape.len() != 3 || shape[1] != rows * cols || shape[2] != c * p * p {
        return Err(TensorError::Shape {
            op: "unpatchify",
            detail: format!("tokens {shape:?} inconsistent with grid {rows}x{cols}, P={p}, C={c}"),
        });
    }
    let b = shape[0];
    let t = seq.tokens.reshape(&[b, rows, cols, c, p, p])?;
    kernels::permute(&t, &[0, 3, 1, 4, 2, 5])?.reshape(&[b, c, rows * p, cols * p])
}

/// Differentiable [`patchify`] of an image variable.
pub fn patchify_var<'t, T: Scalar>(pixels: Var<'t, T>, p: usize) -> Result<Var<'t, T>, TensorError> {
    let shape = pixels.shape();
    check_patch_geometry(&shape, p)?;
    let (split, rows, cols) = patch_axes(&shape, p);
    pixels
        .reshape(&split)?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[split[0], rows * cols, split[1] * p * p])
}

/// Low-resolution view at the original extent: block-average by `s`, then
/// nearest-neighbor resize back to `H×W` so its patch grid aligns with the
/// full-resolution one.
pub fn make_lr_view<T: Scalar>(pixels: &Tensor<T>, s: usize) -> Result<Tensor<T>, TensorError> {
    let (h, w) = (pixels.shape()[2], pixels.shape()[3]);
    let small = kernels::downsample_area(pixels, s)?;
    kernels::interpolate_nearest(&small, h, w)
}

/// Differentiable [`make_lr_view`].
pub fn make_lr_view_var<'t, T: Scalar>(pixels: Var<'t, T>, s: usize) -> Result<Var<'t, T>, TensorError> {
    let shape = pixels.shape();
    pixels.downsample_area(s)?.interpolate_nearest(shape[2], shape[3])
}

/// Nearest-neighbor resize of every image to `out_h × out_w`.
pub fn resize_nearest(batch: &ImageBatch, out_h: usize, out_w: usize) -> Result<ImageBatch, TensorError> {
    Ok(ImageBatch {
        pixels: kernels::interpolate_nearest(&batch.pixels, out_h, out_w)?,
        labels: batch.labels.clone(),
    })
}
