use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::SCALE_FACTORS;

/// Architecture and pretext-task geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrmaeConfig {
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub head_dim: usize,
    pub head_depth: usize,
    pub head_heads: usize,
    pub mlp_ratio: usize,
    pub hpb_width: usize,
    pub hpb_blocks: usize,
    pub scale_factor: usize,
    pub mask_ratio: f64,
    pub norm_pix: bool,
    /// Classification classes; 0 means unset.
    pub num_classes: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for SrmaeConfig {
    /// Desk-scale digits geometry: 32×32 gray images, 4×4 patches.
    fn default() -> Self {
        Self {
            patch_size: 4,
            image_height: 32,
            image_width: 32,
            channels: 1,
            enc_dim: 64,
            enc_depth: 4,
            enc_heads: 4,
            head_dim: 32,
            head_depth: 4,
            head_heads: 2,
            mlp_ratio: 4,
            hpb_width: 16,
            hpb_blocks: 1,
            scale_factor: 2,
            mask_ratio: 0.75,
            norm_pix: false,
            num_classes: 10,
            dropout: 0.0,
            ln_eps: 1e-6,
        }
    }
}

impl SrmaeConfig {
    /// ViT-Base encoder at 224×224 with 16×16 patches and ×4 downsampling.
    pub fn vit_base() -> Self {
        Self {
            patch_size: 16,
            image_height: 224,
            image_width: 224,
            channels: 3,
            enc_dim: 768,
            enc_depth: 12,
            enc_heads: 12,
            head_dim: 384,
            head_depth: 4,
            head_heads: 12,
            mlp_ratio: 4,
            hpb_width: 64,
            hpb_blocks: 2,
            scale_factor: 4,
            mask_ratio: 0.75,
            norm_pix: false,
            num_classes: 1000,
            dropout: 0.0,
            ln_eps: 1e-6,
        }
    }

    /// Smallest geometry used by the gradient checker.
    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            image_height: 16,
            image_width: 16,
            channels: 1,
            enc_dim: 16,
            enc_depth: 2,
            enc_heads: 2,
            head_dim: 8,
            head_depth: 1,
            head_heads: 2,
            mlp_ratio: 2,
            hpb_width: 4,
            hpb_blocks: 1,
            scale_factor: 2,
            mask_ratio: 0.75,
            norm_pix: false,
            num_classes: 10,
            dropout: 0.0,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let p = self.patch_size;
        if p == 0 || !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return fail(format!(
                "image {}x{} is not divisible by patch size {p}",
                self.image_height, self.image_width
            ));
        }
        let (rows, cols) = self.grid();
        if rows < 2 || cols < 2 {
            return fail(format!("patch grid {rows}x{cols} is too small (need at least 2x2)"));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        for (name, dim, heads) in [
            ("encoder", self.enc_dim, self.enc_heads),
            ("head", self.head_dim, self.head_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return fail(format!("{name} dim {dim} is not divisible by {heads} heads"));
            }
            if dim % 4 != 0 {
                return fail(format!("{name} dim {dim} must be a multiple of 4 (2D sin-cos positions)"));
            }
        }
        if self.mlp_ratio == 0 || self.hpb_width == 0 {
            return fail("mlp_ratio and hpb_width must be positive".into());
        }
        if !SCALE_FACTORS.contains(&self.scale_factor) {
            return fail(format!("scale factor {} not in {{2, 3, 4}}", self.scale_factor));
        }
        if self.image_height / self.scale_factor == 0 || self.image_width / self.scale_factor == 0 {
            return fail("image smaller than the scale factor".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail(format!("mask ratio {} not in [0, 1)", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Closed-form learnable parameter count of the pretraining model (the
    /// classification head, when `with_classifier`, swaps the prediction head
    /// out). Positional tables are excluded.
    pub fn param_count(&self, with_classifier: bool) -> usize {
        let block = |d: usize| {
            let hidden = d * self.mlp_ratio;
            // two norms, qkv, proj, fc1, fc2
            4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
        };
        let (e, h, pd, w) = (self.enc_dim, self.head_dim, self.patch_dim(), self.hpb_width);
        let encoder = (pd * e + e) + self.enc_depth * block(e) + 2 * e;
        if with_classifier {
            return encoder + e * self.num_classes + self.num_classes;
        }
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let hpb = conv(h, w, 3) + conv(w, w, 3) + self.hpb_blocks * conv(w, w, 3) + conv(w, h, 1);
        let head = (e * h + h) + (pd * h + h) + hpb + self.head_depth * block(h) + 2 * h + (h * pd + pd);
        encoder + head
    }
}
