//! Run configuration as flat `key = value` text with dotted namespaces.
//!
//! ```text
//! # comment
//! model.scale_factor = 2
//! train.epochs = 30
//! data.format = synthetic
//! ```
//!
//! Every key has a default, so an empty file is a valid configuration.
//! [`RunConfig::to_canonical_text`] writes every key in a fixed order; parsing
//! that text reproduces the configuration exactly.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataFormat;
use crate::error::{Error, Result};
use crate::model::SrmaeConfig;
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Pretrain,
    Finetune,
    Eval,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
            Mode::Eval => "eval",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Mode::Pretrain),
            "finetune" => Ok(Mode::Finetune),
            "eval" => Ok(Mode::Eval),
            other => Err(format!("unknown mode `{other}` (expected pretrain, finetune or eval)")),
        }
    }
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per gradient shard; shards run in parallel and are summed in a
    /// fixed order. 0 means one shard per batch.
    pub micro_batch: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Checkpoint cadence in epochs; the final epoch is always saved.
    pub ckpt_every: usize,
    /// Evaluation image height in pixels before resizing back to the model
    /// extent; 0 evaluates at native resolution.
    pub eval_resolution: usize,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pretrain,
            epochs: 30,
            batch_size: 64,
            micro_batch: 0,
            base_lr: 1e-3,
            min_lr: 0.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_epochs: 5,
            seed: 0,
            ckpt_every: 10,
            eval_resolution: 0,
            dtype: DType::Float32,
        }
    }
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub format: DataFormat,
    /// Training images (ignored for synthetic data).
    pub root: String,
    /// Held-out images. When empty, the last `test_size` images of `root`
    /// are held out instead.
    pub test_root: String,
    /// Synthetic corpus sizes; `test_size` also bounds the held-out split.
    pub train_size: usize,
    pub test_size: usize,
    /// Seed of the synthetic corpus, independent of the training seed.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: DataFormat::Synthetic,
            root: String::new(),
            test_root: String::new(),
            train_size: 2000,
            test_size: 500,
            seed: 0,
        }
    }
}

/// Training-time augmentation. Defaults suit digit glyphs, which mirroring
/// would turn into other shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub flip_p: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_scale_min: 0.6,
            crop_scale_max: 1.0,
            flip_p: 0.0,
        }
    }
}

impl AugConfig {
    pub fn is_identity(&self) -> bool {
        self.crop_scale_min >= 1.0 && self.flip_p == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: SrmaeConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub aug: AugConfig,
}

fn parse_into<T: FromStr>(slot: &mut T, v: &str) -> std::result::Result<(), String>
where
    T::Err: fmt::Display,
{
    *slot = v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))?;
    Ok(())
}

macro_rules! config_keys {
    ($( $key:literal => $($field:ident).+ ;)*) => {
        /// Every accepted key, in canonical order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_field(c: &mut RunConfig, key: &str, v: &str) -> Option<std::result::Result<(), String>> {
            match key {
                $( $key => Some(parse_into(&mut c.$($field).+, v)), )*
                _ => None,
            }
        }

        fn get_field(c: &RunConfig, key: &str) -> Option<String> {
            match key {
                $( $key => Some(c.$($field).+.to_string()), )*
                _ => None,
            }
        }
    };
}

config_keys! {
    "model.patch_size" => model.patch_size;
    "model.image_height" => model.image_height;
    "model.image_width" => model.image_width;
    "model.channels" => model.channels;
    "model.enc_dim" => model.enc_dim;
    "model.enc_depth" => model.enc_depth;
    "model.enc_heads" => model.enc_heads;
    "model.head_dim" => model.head_dim;
    "model.head_depth" => model.head_depth;
    "model.head_heads" => model.head_heads;
    "model.mlp_ratio" => model.mlp_ratio;
    "model.hpb_width" => model.hpb_width;
    "model.hpb_blocks" => model.hpb_blocks;
    "model.scale_factor" => model.scale_factor;
    "model.mask_ratio" => model.mask_ratio;
    "model.norm_pix" => model.norm_pix;
    "model.num_classes" => model.num_classes;
    "model.dropout" => model.dropout;
    "model.ln_eps" => model.ln_eps;
    "train.mode" => train.mode;
    "train.epochs" => train.epochs;
    "train.batch_size" => train.batch_size;
    "train.micro_batch" => train.micro_batch;
    "train.base_lr" => train.base_lr;
    "train.min_lr" => train.min_lr;
    "train.weight_decay" => train.weight_decay;
    "train.beta1" => train.beta1;
    "train.beta2" => train.beta2;
    "train.eps" => train.eps;
    "train.warmup_epochs" => train.warmup_epochs;
    "train.seed" => train.seed;
    "train.ckpt_every" => train.ckpt_every;
    "train.eval_resolution" => train.eval_resolution;
    "train.dtype" => train.dtype;
    "data.format" => data.format;
    "data.root" => data.root;
    "data.test_root" => data.test_root;
    "data.train_size" => data.train_size;
    "data.test_size" => data.test_size;
    "data.seed" => data.seed;
    "aug.crop_scale_min" => aug.crop_scale_min;
    "aug.crop_scale_max" => aug.crop_scale_max;
    "aug.flip_p" => aug.flip_p;
}

fn unknown(key: &str) -> Error {
    Error::UnknownKey {
        key: key.to_string(),
        valid: KEYS.iter().map(|k| k.to_string()).collect(),
    }
}

/// Splits `key = value`; `None` for blank and comment lines.
fn split_line(line: &str) -> Option<std::result::Result<(&str, &str), String>> {
    let t = line.trim();
    if t.is_empty() || t.starts_with('#') {
        return None;
    }
    Some(match t.split_once('=') {
        Some((k, v)) => Ok((k.trim(), v.trim())),
        None => Err(format!("expected `key = value`, got `{t}`")),
    })
}

/// Parses one `--set` override of the form `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("override `{s}` is not of the form key=value"))),
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        get_field(self, key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match set_field(self, key, value) {
            None => Err(unknown(key)),
            Some(Err(message)) => Err(Error::Config(format!("`{key}`: {message}"))),
            Some(Ok(())) => Ok(()),
        }
    }

    /// Parses config text and applies `overrides` on top. Mode-dependent
    /// defaults (fine-tuning betas) apply only to keys set nowhere.
    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut explicit = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let Some(kv) = split_line(line) else { continue };
            let (key, value) = kv.map_err(|message| Error::ConfigLine {
                line: i + 1,
                key: String::new(),
                message,
            })?;
            match set_field(&mut cfg, key, value) {
                None => return Err(unknown(key)),
                Some(Err(message)) => {
                    return Err(Error::ConfigLine {
                        line: i + 1,
                        key: key.to_string(),
                        message,
                    })
                }
                Some(Ok(())) => {
                    explicit.insert(key.to_string());
                }
            }
        }
        for (key, value) in overrides {
            match set_field(&mut cfg, key, value) {
                None => return Err(unknown(key)),
                Some(Err(message)) => return Err(Error::Config(format!("--set {key}: {message}"))),
                Some(Ok(())) => {
                    explicit.insert(key.clone());
                }
            }
        }
        if cfg.train.mode != Mode::Pretrain && !explicit.contains("train.beta2") {
            cfg.train.beta2 = 0.999;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Every key in canonical order, one `key = value` per line.
    pub fn to_canonical_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&get_field(self, key).expect("listed key"));
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        let fail = |m: String| Err(Error::Config(m));
        if t.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if !(t.base_lr > 0.0) || t.min_lr < 0.0 || t.min_lr > t.base_lr {
            return fail(format!("need 0 <= min_lr <= base_lr and base_lr > 0 (got {}, {})", t.min_lr, t.base_lr));
        }
        if t.mode != Mode::Eval && t.epochs > 0 && t.warmup_epochs >= t.epochs {
            return fail(format!("warmup_epochs {} must be below epochs {}", t.warmup_epochs, t.epochs));
        }
        for (name, b) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("train.{name} = {b} not in [0, 1)"));
            }
        }
        if !(t.eps > 0.0) || t.weight_decay < 0.0 {
            return fail("train.eps must be positive and weight_decay non-negative".into());
        }
        if t.mode == Mode::Pretrain && self.model.mask_ratio == 0.0 {
            return fail("pretraining needs model.mask_ratio > 0: with every patch visible the loss is undefined".into());
        }
        if t.mode != Mode::Pretrain && self.model.num_classes == 0 {
            return fail("model.num_classes must be set for fine-tuning and evaluation".into());
        }
        let a = &self.aug;
        if !(a.crop_scale_min > 0.0 && a.crop_scale_min <= a.crop_scale_max && a.crop_scale_max <= 1.0) {
            return fail(format!("aug crop scale [{}, {}] must lie in (0, 1]", a.crop_scale_min, a.crop_scale_max));
        }
        if !(0.0..=1.0).contains(&a.flip_p) {
            return fail(format!("aug.flip_p = {} not in [0, 1]", a.flip_p));
        }
        if self.data.format != DataFormat::Synthetic && self.data.root.is_empty() {
            return fail(format!("data.root is required for format {}", self.data.format));
        }
        Ok(())
    }

    /// Effective shard size for data-parallel gradients.
    pub fn micro_batch(&self) -> usize {
        match self.train.micro_batch {
            0 => self.train.batch_size,
            m => m.min(self.train.batch_size),
        }
    }
}
