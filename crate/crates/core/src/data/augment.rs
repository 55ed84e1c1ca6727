use rand::Rng;

use super::ImageBatch;
use crate::error::TensorError;
use crate::tensor::{kernels, Tensor};

/// Crop window in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

const ASPECT_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

fn check_scale_range(scale: (f64, f64)) -> Result<(), TensorError> {
    let (lo, hi) = scale;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(TensorError::config(
            "random_resized_crop",
            format!("scale range [{lo}, {hi}] must lie in (0, 1]"),
        ));
    }
    Ok(())
}

/// Samples a crop whose area fraction is uniform in `scale` and whose aspect
/// ratio is log-uniform in [3/4, 4/3]. After ten rejected draws falls back to
/// a square crop of the sampled area, clamped to the image.
pub fn sample_crop_rect(h: usize, w: usize, scale: (f64, f64), rng: &mut impl Rng) -> Result<CropRect, TensorError> {
    check_scale_range(scale)?;
    let area = (h * w) as f64;
    let target = area * rng.random_range(scale.0..=scale.1);
    let (lr0, lr1) = (ASPECT_RANGE.0.ln(), ASPECT_RANGE.1.ln());
    for _ in 0..10 {
        let aspect = rng.random_range(lr0..=lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return Ok(CropRect {
                top,
                left,
                height: ch,
                width: cw,
            });
        }
    }
    let side = target.sqrt().round() as usize;
    let (ch, cw) = (side.clamp(1, h), side.clamp(1, w));
    Ok(CropRect {
        top: rng.random_range(0..=h - ch),
        left: rng.random_range(0..=w - cw),
        height: ch,
        width: cw,
    })
}

/// Copies `rect` out of a `[C,H,W]` image and nearest-resizes it.
pub fn crop_resize(img: &[f32], c: usize, h: usize, w: usize, rect: CropRect, out: (usize, usize)) -> Vec<f32> {
    let (oh, ow) = out;
    debug_assert!(rect.top + rect.height <= h && rect.left + rect.width <= w);
    let mut dst = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            let sy = rect.top + kernels::nearest_source(i, rect.height, oh);
            for j in 0..ow {
                let sx = rect.left + kernels::nearest_source(j, rect.width, ow);
                dst.push(plane[sy * w + sx]);
            }
        }
    }
    dst
}

/// Independently crops and resizes every image of the batch.
pub fn random_resized_crop(
    batch: &ImageBatch,
    out_size: (usize, usize),
    scale: (f64, f64),
    rng: &mut impl Rng,
) -> Result<ImageBatch, TensorError> {
    check_scale_range(scale)?;
    if out_size.0 == 0 || out_size.1 == 0 {
        return Err(TensorError::config("random_resized_crop", "output size must be positive"));
    }
    let (b, c, h, w) = (batch.len(), batch.channels(), batch.height(), batch.width());
    let img = c * h * w;
    let mut pixels = Vec::with_capacity(b * c * out_size.0 * out_size.1);
    for i in 0..b {
        let rect = sample_crop_rect(h, w, scale, rng)?;
        pixels.extend(crop_resize(&batch.pixels.data()[i * img..(i + 1) * img], c, h, w, rect, out_size));
    }
    ImageBatch::new(
        Tensor::new(vec![b, c, out_size.0, out_size.1], pixels)?,
        batch.labels.clone(),
    )
}

/// Mirrors each image across its vertical axis with probability `p`.
pub fn horizontal_flip(batch: &ImageBatch, p: f64, rng: &mut impl Rng) -> Result<ImageBatch, TensorError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(TensorError::config("horizontal_flip", format!("probability {p} not in [0, 1]")));
    }
    let (b, c, h, w) = (batch.len(), batch.channels(), batch.height(), batch.width());
    let img = c * h * w;
    let mut pixels = batch.pixels.data().to_vec();
    for i in 0..b {
        if rng.random_bool(p) {
            for row in pixels[i * img..(i + 1) * img].chunks_mut(w) {
                row.reverse();
            }
        }
    }
    ImageBatch::new(Tensor::new(vec![b, c, h, w], pixels)?, batch.labels.clone())
}
