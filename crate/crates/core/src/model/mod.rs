//! The SRMAE network: visible-patch ViT encoder, LR-clue prediction head
//! (splice, HPB, light ViT, pixel regression), reconstruction loss and the
//! classification variant used for fine-tuning.
//!
//! Parameter paths (weights of linear layers are `[in, out]`, conv weights
//! `[out, in, k, k]`):
//!
//! ```text
//! patch_embed.{weight,bias}               [P·P·C, E], [E]
//! pos_embed.encoder                       [N, E]     frozen
//! encoder.block{i}.norm1.{weight,bias}    [E]
//! encoder.block{i}.attn.qkv.{weight,bias} [E, 3E], [3E]
//! encoder.block{i}.attn.proj.{weight,bias}
//! encoder.block{i}.norm2.{weight,bias}
//! encoder.block{i}.mlp.fc1.{weight,bias}  [E, rE]
//! encoder.block{i}.mlp.fc2.{weight,bias}  [rE, E]
//! encoder.norm.{weight,bias}
//! head.enc_proj.{weight,bias}             [E, D]
//! head.lr_embed.{weight,bias}             [P·P·C, D]
//! head.pos_embed                          [N, D]     frozen
//! head.hpb.in_conv / reduce / body{j} / out_conv .{weight,bias}
//! head.block{i}.*                         as encoder blocks, width D
//! head.norm.{weight,bias}
//! head.pred.{weight,bias}                 [D, P·P·C] zero-initialized
//! cls.{weight,bias}                       [E, K]     fine-tuning only
//! ```

mod config;
mod hpb;
mod layers;
mod params;
mod posembed;

pub use config::SrmaeConfig;
pub use hpb::{GridFeatureExtractor, Hpb};
pub use layers::{AttentionTrace, ForwardCtx};
pub use params::{Bound, Param, ParamStore};
pub use posembed::sincos_2d;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_lr_view, patchify, patchify_var};
use crate::error::{Error, Result, TensorError};
use crate::masking::{gather_masked, gather_visible, splice_full, MaskSpec};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use layers::{block, init_block, init_linear, init_norm, linear, norm, PROJ_STD};

/// Prefix of every prediction-head parameter; dropped for fine-tuning.
pub const HEAD_PREFIX: &str = "head.";
pub const CLS_PREFIX: &str = "cls.";

/// Configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SrmaeModel<T> {
    pub config: SrmaeConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> SrmaeModel<T> {
    /// Pretraining layout (encoder + prediction head), seeded init.
    pub fn new(config: SrmaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (rows, cols) = config.grid();
        let (e, d, pd) = (config.enc_dim, config.head_dim, config.patch_dim());

        init_linear(&mut store, "patch_embed", pd, e, false, &mut rng);
        store.insert("pos_embed.encoder", sincos_2d(e, rows, cols), false);
        for i in 0..config.enc_depth {
            init_block(&mut store, &format!("encoder.block{i}"), e, config.mlp_ratio, &mut rng);
        }
        init_norm(&mut store, "encoder.norm", e);

        init_linear(&mut store, "head.enc_proj", e, d, false, &mut rng);
        init_linear(&mut store, "head.lr_embed", pd, d, false, &mut rng);
        store.insert("head.pos_embed", sincos_2d(d, rows, cols), false);
        config_hpb(&config).init(&mut store, "head.hpb", d, &mut rng);
        for i in 0..config.head_depth {
            init_block(&mut store, &format!("head.block{i}"), d, config.mlp_ratio, &mut rng);
        }
        init_norm(&mut store, "head.norm", d);
        init_linear(&mut store, "head.pred", d, pd, true, &mut rng);
        Ok(Self { config, params: store })
    }

    /// Encoder plus a fresh classification head.
    pub fn classifier(config: SrmaeConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        m.attach_classifier(seed)?;
        Ok(m)
    }

    /// Drops the prediction head and attaches a fresh `cls.*` head. Returns the
    /// number of head tensors discarded.
    pub fn attach_classifier(&mut self, seed: u64) -> Result<usize> {
        let k = self.config.num_classes;
        if k == 0 {
            return Err(Error::Config("num_classes is unset; classification needs model.num_classes".into()));
        }
        let dropped = self.params.remove_prefix(HEAD_PREFIX);
        self.params.remove_prefix(CLS_PREFIX);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        self.params
            .insert("cls.weight", params::trunc_normal(&[self.config.enc_dim, k], PROJ_STD, &mut rng), true);
        self.params.insert("cls.bias", Tensor::zeros(&[k]), true);
        Ok(dropped)
    }

    pub fn has_head(&self) -> bool {
        self.params.contains("head.pred.weight")
    }

    pub fn has_classifier(&self) -> bool {
        self.params.contains("cls.weight")
    }

    pub fn bind<'a, 't>(&'a self, tape: &'t Tape<T>) -> Net<'a, 't, T> {
        Net {
            cfg: &self.config,
            p: self.params.bind(tape),
            tape,
        }
    }

    /// [`bind`](Self::bind) with parameter `name` read from `var` instead of
    /// the store, so a loss can be differentiated with respect to it.
    pub fn bind_with<'a, 't>(&'a self, tape: &'t Tape<T>, name: &str, var: Var<'t, T>) -> Net<'a, 't, T> {
        let mut p = self.params.bind(tape);
        p.replace(name, var);
        Net {
            cfg: &self.config,
            p,
            tape,
        }
    }

    pub fn cast<U: Scalar>(&self) -> SrmaeModel<U> {
        SrmaeModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

fn config_hpb(cfg: &SrmaeConfig) -> Hpb {
    Hpb {
        width: cfg.hpb_width,
        blocks: cfg.hpb_blocks,
    }
}

/// Outputs of one pretraining forward pass.
pub struct ForwardArtifacts<'t, T: Scalar> {
    /// `x_e`: encoder output over visible tokens `[B, n_visible, E]`.
    pub latent: Var<'t, T>,
    /// `y^p`: predicted pixels for every patch `[B, N, P·P·C]`.
    pub prediction: Var<'t, T>,
    pub loss: Var<'t, T>,
    pub mask: MaskSpec,
}

/// Parameters bound to a tape, with the forward functions.
pub struct Net<'a, 't, T: Scalar> {
    cfg: &'a SrmaeConfig,
    p: Bound<'t, T>,
    tape: &'t Tape<T>,
}

impl<'a, 't, T: Scalar> Net<'a, 't, T> {
    pub fn params(&self) -> &Bound<'t, T> {
        &self.p
    }

    pub fn config(&self) -> &SrmaeConfig {
        self.cfg
    }

    fn check_tokens(&self, op: &'static str, x: &Var<'t, T>, positions: &[usize]) -> Result<(usize, usize), TensorError> {
        let s = x.shape();
        let pd = self.cfg.patch_dim();
        if s.len() != 3 || s[2] != pd {
            return Err(TensorError::Shape {
                op,
                detail: format!("expected raw pixel tokens [B,n,{pd}], got {s:?}"),
            });
        }
        let n_all = self.cfg.num_patches();
        if positions.len() != s[0] * s[1] || positions.iter().any(|&j| j >= n_all) {
            return Err(TensorError::Shape {
                op,
                detail: format!("{} positions for tokens {s:?} on a grid of {n_all}", positions.len()),
            });
        }
        Ok((s[0], s[1]))
    }

    fn positional(&self, table: &str, positions: &[usize], b: usize, n: usize) -> Result<Var<'t, T>, TensorError> {
        let t = self.p.get(table);
        let d = t.shape()[1];
        t.index_select(0, positions)?.reshape(&[b, n, d])
    }

    /// Projects raw visible pixel tokens to the encoder width and adds the
    /// positional row of each token's grid cell. `positions` holds the cell
    /// indices per sample, concatenated.
    pub fn embed_hr(&self, tokens: Var<'t, T>, positions: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let (b, n) = self.check_tokens("embed_hr", &tokens, positions)?;
        linear(&self.p, "patch_embed", tokens)?.add(self.positional("pos_embed.encoder", positions, b, n)?)
    }

    /// Pre-norm transformer stack and final norm.
    pub fn encode(&self, x: Var<'t, T>, ctx: &mut ForwardCtx<'_>) -> Result<Var<'t, T>, TensorError> {
        let mut x = x;
        for i in 0..self.cfg.enc_depth {
            x = block(&self.p, &format!("encoder.block{i}"), x, self.cfg.enc_heads, self.cfg.ln_eps, ctx)?;
        }
        norm(&self.p, "encoder.norm", x, self.cfg.ln_eps).map_err(|e| e.within("encoder.norm"))
    }

    /// Projects LR pixel tokens at masked cells to the head width, with
    /// positions added.
    pub fn embed_lr(&self, tokens: Var<'t, T>, positions: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let (b, n) = self.check_tokens("embed_lr", &tokens, positions)?;
        if n == 0 {
            return Ok(self.tape.constant(Tensor::zeros(&[b, 0, self.cfg.head_dim])));
        }
        linear(&self.p, "head.lr_embed", tokens)?.add(self.positional("head.pos_embed", positions, b, n)?)
    }

    /// Splices projected encoder tokens with LR tokens, runs the HPB on the
    /// token grid, the light ViT and the pixel regression.
    pub fn head_forward(
        &self,
        latent: Var<'t, T>,
        lr_tokens: Var<'t, T>,
        m: &MaskSpec,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var<'t, T>, TensorError> {
        let (rows, cols) = self.cfg.grid();
        let n = m.num_patches();
        if n != rows * cols {
            return Err(TensorError::Shape {
                op: "head_forward",
                detail: format!("{n} tokens cannot form the {rows}x{cols} grid"),
            });
        }
        let b = m.batch();
        let d = self.cfg.head_dim;
        let vis_pos = self.positional("head.pos_embed", &m.visible_flat(), b, m.n_visible())?;
        let projected = linear(&self.p, "head.enc_proj", latent)?.add(vis_pos)?;
        let full = splice_full(projected, lr_tokens, m)?;

        let grid = full.permute(&[0, 2, 1])?.reshape(&[b, d, rows, cols])?;
        let feat = config_hpb(self.cfg).forward(&self.p, "head.hpb", grid)?;
        let mut x = feat.reshape(&[b, d, n])?.permute(&[0, 2, 1])?;

        for i in 0..self.cfg.head_depth {
            x = block(&self.p, &format!("head.block{i}"), x, self.cfg.head_heads, self.cfg.ln_eps, ctx)?;
        }
        let x = norm(&self.p, "head.norm", x, self.cfg.ln_eps).map_err(|e| e.within("head.norm"))?;
        linear(&self.p, "head.pred", x).map_err(|e| e.within("head.pred"))
    }

    /// Encoder and head over `[B,C,H,W]` full- and low-resolution images.
    /// Returns `(latent, prediction)`.
    pub fn predict(
        &self,
        hr: Var<'t, T>,
        lr: Var<'t, T>,
        m: &MaskSpec,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(Var<'t, T>, Var<'t, T>), TensorError> {
        let p = self.cfg.patch_size;
        let visible = gather_visible(patchify_var(hr, p)?, m)?;
        let lr_masked = gather_masked(patchify_var(lr, p)?, m)?;
        let latent = self.encode(self.embed_hr(visible, &m.visible_flat())?, ctx)?;
        let lr_tokens = self.embed_lr(lr_masked, &m.masked_flat())?;
        let pred = self.head_forward(latent, lr_tokens, m, ctx)?;
        Ok((latent, pred))
    }

    /// Full pretraining forward with the masked reconstruction loss; the
    /// target is the patchified value of `hr`.
    pub fn pretrain_forward(
        &self,
        hr: Var<'t, T>,
        lr: Var<'t, T>,
        m: &MaskSpec,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ForwardArtifacts<'t, T>, TensorError> {
        let (latent, prediction) = self.predict(hr, lr, m, ctx)?;
        let target = patchify(&hr.value(), self.cfg.patch_size)?.tokens;
        let loss = reconstruction_loss(prediction, &target, m, self.cfg.norm_pix)?;
        Ok(ForwardArtifacts {
            latent,
            prediction,
            loss,
            mask: m.clone(),
        })
    }

    /// [`Net::pretrain_forward`] on constant images, deriving the LR view.
    pub fn pretrain_images(
        &self,
        images: &Tensor<T>,
        m: &MaskSpec,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ForwardArtifacts<'t, T>, TensorError> {
        let lr = make_lr_view(images, self.cfg.scale_factor)?;
        self.pretrain_forward(self.tape.constant(images.clone()), self.tape.constant(lr), m, ctx)
    }

    /// Unmasked encoder, mean pooling over tokens, linear class head.
    pub fn classify_forward(&self, img: Var<'t, T>, ctx: &mut ForwardCtx<'_>) -> Result<Var<'t, T>, TensorError> {
        if self.p.try_get("cls.weight").is_none() {
            return Err(TensorError::config(
                "classify_forward",
                "no classification head attached (num_classes unset?)",
            ));
        }
        let tokens = patchify_var(img, self.cfg.patch_size)?;
        let s = tokens.shape();
        let (b, n) = (s[0], s[1]);
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let x = self.encode(self.embed_hr(tokens, &positions)?, ctx)?;
        linear(&self.p, "cls", x.mean_axis(1)?)
    }
}

/// Per-patch standardization of `[B,N,D]` targets.
pub fn normalize_patches<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d.max(1)) {
        let n: T = crate::tensor::lit(row.len() as f64);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + crate::tensor::lit(1e-6)).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * inv));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Mean squared error over masked-position tokens (mean over masked tokens
/// and pixel dims). With `norm_pix`, each target patch is standardized first.
pub fn reconstruction_loss<'t, T: Scalar>(
    pred: Var<'t, T>,
    target: &Tensor<T>,
    m: &MaskSpec,
    norm_pix: bool,
) -> Result<Var<'t, T>, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::shape("reconstruction_loss", &pred.shape(), target.shape()));
    }
    if m.n_masked() == 0 {
        return Err(TensorError::config(
            "reconstruction_loss",
            "mask ratio 0 leaves no masked patches; the loss is undefined",
        ));
    }
    let target = if norm_pix { normalize_patches(target) } else { target.clone() };
    let picked = crate::tensor::kernels::gather_rows(&target, &m.masked_flat(), m.n_masked())?;
    gather_masked(pred, m)?.mse(pred.tape().constant(picked))
}
