//! Job entry points shared by the HTTP service and the command line.
//!
//! A [`JobRequest`] carries a command plus the command-line flags (`--config`
//! text, `--set` overrides, `--init`, `--out`, `--seed`, `--dtype`). Training
//! jobs write a fixed layout under the output directory:
//!
//! ```text
//! <out>/manifest.txt          resolved config, digests, version, timestamp
//! <out>/metrics.ndjson        one record per step and per epoch
//! <out>/ckpt/epoch_0001.srmk
//! <out>/recon/recon_0000.ppm  reconstruction triptychs
//! ```
//!
//! The manifest is itself a valid config file: metadata lives in comment
//! lines and the body is the canonical resolved configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{parse_override, Mode, RunConfig};
use crate::data::{formats, load_dataset, make_lr_view, patchify, unpatchify, DataFormat, NormStats, PatchSequence};
use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::model::{ForwardCtx, SrmaeConfig, SrmaeModel, HEAD_PREFIX};
use crate::tensor::{finite_diff_check, op_suite, DType, GradCheckOptions, Scalar, Tape, Tensor};
use crate::train::{
    check_compatible, checkpoint_path, evaluate, finetune, load_checkpoint, load_splits, pretrain, stored_dtype,
    Checkpoint, Event, MetricRecord, MetricsSink, FORMAT_VERSION, MAGIC,
};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CKPT_DIR: &str = "ckpt";
pub const RECON_DIR: &str = "recon";
const MANIFEST_HEADER: &str = "# srmae run manifest";

/// Images written by `reconstruct` when no `--images` are given.
const DEFAULT_RECON_IMAGES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Pretrain,
    Finetune,
    Eval,
    Gradcheck,
    Reconstruct,
    Inspect,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::Reconstruct => "reconstruct",
            Command::Inspect => "inspect",
        }
    }

    fn mode(self) -> Option<Mode> {
        match self {
            Command::Pretrain => Some(Mode::Pretrain),
            Command::Finetune => Some(Mode::Finetune),
            Command::Eval => Some(Mode::Eval),
            _ => None,
        }
    }
}

/// One unit of work, as submitted to the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub command: Command,
    /// Text of the `--config` file.
    #[serde(default)]
    pub config: Option<String>,
    /// Where `config` was read from; recorded in the manifest.
    #[serde(default)]
    pub config_path: Option<String>,
    /// `key=value` overrides, applied in order after the config text.
    #[serde(default)]
    pub overrides: Vec<String>,
    /// Checkpoint to start from (or to evaluate, reconstruct with, inspect).
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Images for `reconstruct`; defaults to the configured held-out split.
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub dtype: Option<DType>,
    /// Corrupts the reverse rule of one op (gradcheck test fixture).
    #[serde(default)]
    pub inject_fault: Option<String>,
}

impl JobRequest {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            config: None,
            config_path: None,
            overrides: Vec::new(),
            init: None,
            out: None,
            images: None,
            seed: None,
            dtype: None,
            inject_fault: None,
        }
    }

    /// Output directory, defaulting to `runs/<command>`.
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(self.command.name()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub op: String,
    pub max_rel_error: f64,
    /// Test cases (or parameter tensors, for the end-to-end loss) checked.
    pub cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum JobOutput {
    Train {
        out: PathBuf,
        checkpoint: PathBuf,
        last_epoch: Option<MetricRecord>,
    },
    Eval {
        record: MetricRecord,
        count: usize,
    },
    Gradcheck {
        dtype: DType,
        tolerance: f64,
        entries: Vec<GradcheckEntry>,
    },
    Reconstruct {
        files: Vec<PathBuf>,
        /// Per-pixel MSE of the clamped prediction at masked patches, in
        /// `[0,1]` pixel units; absent when nothing is masked.
        masked_mse: Option<f64>,
    },
    Inspect {
        summary: serde_json::Value,
    },
}

pub type Observer = Box<dyn FnMut(&Event) + Send>;

/// Runs one job to completion. Progress (metric records and notes) goes to
/// `observer` as it happens.
pub fn run_job(req: &JobRequest, observer: Option<Observer>) -> Result<JobOutput> {
    let mut observer = observer;
    let mut attach = |sink: MetricsSink| match observer.take() {
        Some(o) => sink.with_observer(o),
        None => sink,
    };
    match req.command {
        Command::Pretrain | Command::Finetune => train_job(req, &mut attach),
        Command::Eval => eval_job(req, &mut attach),
        Command::Gradcheck => gradcheck_job(req, &mut attach(MetricsSink::memory())),
        Command::Reconstruct => reconstruct_job(req, &mut attach(MetricsSink::memory())),
        Command::Inspect => inspect_job(req),
    }
}

/// The `model.*` and `data.*` keys of a checkpoint's config, as config text.
fn inherited_text(cfg: &RunConfig) -> String {
    cfg.to_canonical_text()
        .lines()
        .filter(|l| l.starts_with("model.") || l.starts_with("data."))
        .map(|l| format!("{l}\n"))
        .collect()
}

/// Resolves the effective config: the `--config` text (or, without one, the
/// geometry of `inherited`, or the tiny geometry for gradcheck), then the
/// `--set` overrides, then `--seed`, `--dtype` and the command's mode.
pub fn resolve_config(req: &JobRequest, inherited: Option<&RunConfig>) -> Result<RunConfig> {
    let base = match (&req.config, inherited) {
        (Some(text), _) => text.clone(),
        (None, Some(c)) => inherited_text(c),
        (None, None) if req.command == Command::Gradcheck => inherited_text(&RunConfig {
            model: SrmaeConfig::tiny(),
            ..RunConfig::default()
        }),
        (None, None) => String::new(),
    };
    let mut overrides = req
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(seed) = req.seed {
        overrides.push(("train.seed".into(), seed.to_string()));
    }
    if let Some(d) = req.dtype {
        overrides.push(("train.dtype".into(), d.name().into()));
    }
    if let Some(mode) = req.command.mode() {
        overrides.push(("train.mode".into(), mode.name().into()));
    }
    RunConfig::parse_with_overrides(&base, &overrides)
}

/// Metadata and config of a manifest file.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub meta: BTreeMap<String, String>,
    pub config: RunConfig,
}

pub fn manifest_text(req: &JobRequest, cfg: &RunConfig) -> String {
    let mut meta: Vec<(&str, String)> = vec![
        ("command", req.command.name().into()),
        ("version", env!("CARGO_PKG_VERSION").into()),
        (
            "timestamp",
            chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        ),
        ("config_digest", cfg.digest()),
    ];
    if let Some(p) = &req.config_path {
        meta.push(("config_path", p.clone()));
    }
    if let Some(text) = &req.config {
        meta.push(("config_file_digest", hex::encode(Sha256::digest(text.as_bytes()))));
    }
    if let Some(init) = &req.init {
        meta.push(("init", init.display().to_string()));
    }
    meta.push((
        "layout",
        format!("{MANIFEST_FILE} {METRICS_FILE} {CKPT_DIR}/epoch_NNNN.srmk {RECON_DIR}/"),
    ));
    let mut text = format!("{MANIFEST_HEADER}\n");
    for (k, v) in meta {
        text.push_str(&format!("# {k}: {v}\n"));
    }
    text.push_str(&cfg.to_canonical_text());
    text
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let meta = text
        .lines()
        .filter_map(|l| l.strip_prefix("# "))
        .filter_map(|l| l.split_once(": "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    Ok(Manifest {
        meta,
        config: RunConfig::parse(text)?,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_init(req: &JobRequest) -> Result<Option<Checkpoint<f64>>> {
    req.init.as_deref().map(load_checkpoint::<f64>).transpose()
}

fn train_job(req: &JobRequest, attach: &mut dyn FnMut(MetricsSink) -> MetricsSink) -> Result<JobOutput> {
    let init = load_init(req)?;
    let cfg = resolve_config(req, init.as_ref().map(|c| &c.config))?;
    cfg.validate()?;
    let out = req.out_dir();
    create_dir(&out)?;
    write_file(&out.join(MANIFEST_FILE), manifest_text(req, &cfg).as_bytes())?;

    let resuming = init.as_ref().is_some_and(|c| c.config.train.mode == cfg.train.mode);
    let metrics = out.join(METRICS_FILE);
    if !resuming && metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
    }
    let mut sink = attach(MetricsSink::to_file(&metrics)?);
    let splits = load_splits(&cfg)?;
    let ckpt_dir = out.join(CKPT_DIR);
    let train = |sink: &mut MetricsSink| -> Result<()> {
        match cfg.train.dtype {
            DType::Float32 => train_typed::<f32>(&cfg, &splits, init.map(|c| c.cast()), sink, &ckpt_dir),
            DType::Float64 => train_typed::<f64>(&cfg, &splits, init, sink, &ckpt_dir),
        }
    };
    train(&mut sink)?;
    let last_epoch = sink
        .phase(&format!("{}_epoch", cfg.train.mode.name()))
        .last()
        .map(|r| (*r).clone());
    Ok(JobOutput::Train {
        checkpoint: checkpoint_path(&ckpt_dir, cfg.train.epochs as u64),
        out,
        last_epoch,
    })
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    splits: &crate::train::Splits,
    init: Option<Checkpoint<T>>,
    sink: &mut MetricsSink,
    ckpt_dir: &Path,
) -> Result<()> {
    match cfg.train.mode {
        Mode::Pretrain => pretrain(cfg, splits, init, sink, Some(ckpt_dir)).map(|_| ()),
        _ => finetune(cfg, splits, init, sink, Some(ckpt_dir)).map(|_| ()),
    }
}

fn geometry(m: &SrmaeConfig) -> String {
    format!(
        "{}x{}x{} images (C,H,W) in {}x{} patches",
        m.channels, m.image_height, m.image_width, m.patch_size, m.patch_size
    )
}

/// Fails with a message naming both geometries when `cfg` cannot hold the
/// checkpoint's tensors.
fn check_geometry<T: Scalar>(cfg: &SrmaeConfig, ck: &Checkpoint<T>, expected: &SrmaeModel<T>, skip: &[&str]) -> Result<()> {
    let c = &ck.config.model;
    if (c.channels, c.image_height, c.image_width, c.patch_size)
        != (cfg.channels, cfg.image_height, cfg.image_width, cfg.patch_size)
    {
        return Err(Error::Mismatch(format!(
            "checkpoint was trained on {} but the config describes {}",
            geometry(c),
            geometry(cfg)
        )));
    }
    check_compatible(&expected.params, &ck.params, skip)
}

fn eval_job(req: &JobRequest, attach: &mut dyn FnMut(MetricsSink) -> MetricsSink) -> Result<JobOutput> {
    let init = load_init(req)?;
    let cfg = resolve_config(req, init.as_ref().map(|c| &c.config))?;
    cfg.validate()?;
    let splits = load_splits(&cfg)?;
    let ds = splits.test.as_ref().unwrap_or(&splits.train);
    let (model, norm, epoch, step) = match init {
        Some(ck) => {
            if !ck.params.contains("cls.weight") {
                return Err(Error::Mismatch(format!(
                    "{} has no classification head; fine-tune it before evaluating",
                    req.init.as_deref().unwrap_or(Path::new("checkpoint")).display()
                )));
            }
            let expected = SrmaeModel::<f64>::classifier(cfg.model.clone(), 0)?;
            check_geometry(&cfg.model, &ck, &expected, &[])?;
            let model = SrmaeModel {
                config: cfg.model.clone(),
                params: ck.params,
            };
            (model, ck.norm, ck.state.epoch, ck.state.global_step)
        }
        None => (
            SrmaeModel::<f64>::classifier(cfg.model.clone(), cfg.train.seed)?,
            ds.channel_stats(),
            0,
            0,
        ),
    };
    let (res, bs) = (cfg.train.eval_resolution, cfg.train.batch_size);
    let report = match cfg.train.dtype {
        DType::Float32 => evaluate(&model.cast::<f32>(), ds, &norm, res, bs)?,
        DType::Float64 => evaluate(&model, ds, &norm, res, bs)?,
    };
    let mut sink = match &req.out {
        Some(dir) => {
            create_dir(dir)?;
            attach(MetricsSink::to_file(&dir.join(METRICS_FILE))?)
        }
        None => attach(MetricsSink::memory()),
    };
    let record = MetricRecord {
        phase: "eval".into(),
        epoch,
        step,
        loss: report.loss,
        lr: 0.0,
        top1: Some(report.top1),
        top5: report.top5,
        wall_ms: sink.elapsed_ms(),
    };
    sink.emit(record.clone())?;
    Ok(JobOutput::Eval {
        record,
        count: report.count,
    })
}

fn gradcheck_job(req: &JobRequest, sink: &mut MetricsSink) -> Result<JobOutput> {
    let cfg = resolve_config(req, None)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.dropout = 0.0;
    model_cfg.validate()?;
    if model_cfg.mask_ratio == 0.0 {
        return Err(Error::Config("gradcheck needs model.mask_ratio > 0 for the reconstruction loss".into()));
    }
    let dtype = req.dtype.unwrap_or(DType::Float64);
    let tolerance = GradCheckOptions::tolerance(dtype);
    let opts = GradCheckOptions {
        fault: req.inject_fault.clone(),
        ..GradCheckOptions::for_dtype(dtype)
    };
    let seed = cfg.train.seed;
    let entries = match dtype {
        DType::Float32 => gradcheck_typed::<f32>(&model_cfg, seed, &opts)?,
        DType::Float64 => gradcheck_typed::<f64>(&model_cfg, seed, &opts)?,
    };
    sink.note(format!("gradcheck {} (tolerance {tolerance:.0e})", dtype.name()));
    for e in &entries {
        let verdict = if e.max_rel_error <= tolerance { "ok" } else { "FAIL" };
        sink.note(format!("{:<24} {:>10.3e}  {verdict}", e.op, e.max_rel_error));
    }
    if let Some(bad) = entries.iter().find(|e| !(e.max_rel_error <= tolerance)) {
        return Err(Error::Verification(format!(
            "gradient of `{}` has max relative error {:.3e} above {tolerance:.0e}",
            bad.op, bad.max_rel_error
        )));
    }
    Ok(JobOutput::Gradcheck {
        dtype,
        tolerance,
        entries,
    })
}

/// Per-op maxima over the op suite, then the end-to-end pretraining loss
/// with respect to every trainable tensor of `cfg`.
pub fn gradcheck_typed<T: Scalar>(cfg: &SrmaeConfig, seed: u64, opts: &GradCheckOptions) -> Result<Vec<GradcheckEntry>> {
    let mut entries: Vec<GradcheckEntry> = Vec::new();
    for case in op_suite::<T>(seed) {
        let r = case.check(opts)?;
        match entries.iter_mut().find(|e| e.op == case.op) {
            Some(e) => {
                e.max_rel_error = e.max_rel_error.max(r.max_rel_error);
                e.cases += 1;
            }
            None => entries.push(GradcheckEntry {
                op: case.op.to_string(),
                max_rel_error: r.max_rel_error,
                cases: 1,
            }),
        }
    }
    let (worst, err, n) = end_to_end::<T>(cfg, seed, opts)?;
    entries.push(GradcheckEntry {
        op: "pretraining_loss".into(),
        max_rel_error: err,
        cases: n,
    });
    if !worst.is_empty() {
        tracing::debug!(tensor = %worst, "worst end-to-end gradient");
    }
    Ok(entries)
}

/// Largest relative error of the masked reconstruction loss over all
/// trainable tensors. Returns the worst tensor, its error and the number of
/// tensors checked.
fn end_to_end<T: Scalar>(cfg: &SrmaeConfig, seed: u64, opts: &GradCheckOptions) -> Result<(String, f64, usize)> {
    let mut model = SrmaeModel::<T>::new(cfg.clone(), seed)?;
    // The zero-initialized output layers would hide every path behind them.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for name in ["head.pred.weight", "head.hpb.out_conv.weight"] {
        if let Some(p) = model.params.get_mut(name) {
            let data: Vec<f64> = (0..p.value.numel()).map(|_| rng.random_range(-0.2..0.2)).collect();
            p.value = Tensor::from_f64(p.value.shape(), &data)?;
        }
    }
    let shape = [2, cfg.channels, cfg.image_height, cfg.image_width];
    let pixels: Vec<f64> = (0..shape.iter().product()).map(|_| rng.random_range(0.0..1.0)).collect();
    let images = Tensor::<T>::from_f64(&shape, &pixels)?;
    let mask = MaskSpec::from_seed(2, cfg.num_patches(), cfg.mask_ratio, seed)?;
    let opts = GradCheckOptions {
        max_coords: Some(12),
        ..opts.clone()
    };

    let (mut worst, mut max_err, mut n) = (String::new(), 0.0f64, 0);
    for (name, p) in model.params.iter().filter(|(_, p)| p.trainable) {
        let r = finite_diff_check(
            |tape, x| {
                let net = model.bind_with(tape, name, x);
                Ok(net.pretrain_images(&images, &mask, &mut ForwardCtx::eval())?.loss)
            },
            &p.value,
            &opts,
        )?;
        n += 1;
        if !(r.max_rel_error <= max_err) {
            max_err = r.max_rel_error;
            worst = name.clone();
        }
    }
    Ok((worst, max_err, n))
}

/// Loads images for reconstruction: one netpbm or raw-tensor file, a
/// directory of either, or an idx file prefix.
pub fn load_images(path: &Path) -> Result<Tensor<f32>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let single = match ext.as_str() {
        "pgm" | "ppm" | "pnm" if path.is_file() => Some(formats::read_pnm(path)?),
        "srt" if path.is_file() => Some(formats::read_srt(path)?),
        _ => None,
    };
    if let Some(img) = single {
        let mut shape = vec![1];
        shape.extend_from_slice(img.shape());
        return Ok(img.reshape(&shape)?);
    }
    let format = if path.is_dir() {
        let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
        let has_srt = entries
            .filter_map(|e| e.ok())
            .any(|e| e.path().extension().is_some_and(|x| x == "srt"));
        if has_srt {
            DataFormat::RawTensorDir
        } else {
            DataFormat::NetpbmDir
        }
    } else {
        DataFormat::IdxPair
    };
    Ok(load_dataset(path, format)?.pixels().clone())
}

fn reconstruct_job(req: &JobRequest, sink: &mut MetricsSink) -> Result<JobOutput> {
    let path = req
        .init
        .as_deref()
        .ok_or_else(|| Error::Config("reconstruct needs a pretraining checkpoint (--checkpoint)".into()))?;
    let ck = load_checkpoint::<f64>(path)?;
    if !ck.params.contains("head.pred.weight") {
        return Err(Error::Mismatch(format!(
            "{} has no prediction head (fine-tuning discards it); reconstruct needs a pretraining checkpoint",
            path.display()
        )));
    }
    let cfg = resolve_config(req, Some(&ck.config))?;
    cfg.model.validate()?;
    let expected = SrmaeModel::<f64>::new(cfg.model.clone(), 0)?;
    check_geometry(&cfg.model, &ck, &expected, &[])?;

    let images = match &req.images {
        Some(p) => load_images(p)?,
        None => {
            let splits = load_splits(&cfg)?;
            let ds = splits.test.unwrap_or(splits.train);
            ds.take(DEFAULT_RECON_IMAGES.min(ds.len())).pixels().clone()
        }
    };
    let m = &cfg.model;
    let want = [m.channels, m.image_height, m.image_width];
    if images.shape()[1..] != want {
        return Err(Error::Mismatch(format!(
            "images are {:?} (C,H,W) but the checkpoint model expects {want:?}",
            &images.shape()[1..]
        )));
    }
    let mask = MaskSpec::from_seed(images.shape()[0], m.num_patches(), m.mask_ratio, cfg.train.seed)?;
    let model = SrmaeModel {
        config: cfg.model.clone(),
        params: ck.params,
    };
    let pred = match cfg.train.dtype {
        DType::Float32 => predict_pixels(&model.cast::<f32>(), &ck.norm, &images, &mask)?,
        DType::Float64 => predict_pixels(&model, &ck.norm, &images, &mask)?,
    };
    let clues = masked_view(&images, &mask, m)?;
    let masked_mse = masked_mse(&pred, &images, &mask, m.patch_size)?;

    let dir = req.out_dir().join(RECON_DIR);
    create_dir(&dir)?;
    let mut files = Vec::new();
    for i in 0..images.shape()[0] {
        let panes = [&images, &clues, &pred].map(|t| sample(t, i));
        let file = dir.join(format!("recon_{i:04}.ppm"));
        formats::write_pnm(&file, &triptych(&panes))?;
        files.push(file);
    }
    let mse = masked_mse.map_or("n/a".to_string(), |v| format!("{v:.5}"));
    sink.note(format!("wrote {} triptychs to {} (masked-patch MSE {mse})", files.len(), dir.display()));
    Ok(JobOutput::Reconstruct { files, masked_mse })
}

/// The model's prediction as clamped `[0,1]` images.
fn predict_pixels<T: Scalar>(
    model: &SrmaeModel<T>,
    norm: &NormStats,
    images: &Tensor<f32>,
    mask: &MaskSpec,
) -> Result<Tensor<f32>> {
    let cfg = &model.config;
    let x: Tensor<T> = norm.normalize(images).cast();
    let lr = make_lr_view(&x, cfg.scale_factor)?;
    let tape = Tape::new();
    let net = model.bind(&tape);
    let (_, pred) = net.predict(tape.constant(x.clone()), tape.constant(lr), mask, &mut ForwardCtx::eval())?;
    let mut seq = patchify(&x, cfg.patch_size)?;
    let tokens = pred.value();
    seq.tokens = if cfg.norm_pix {
        // Undo the per-patch standardization with each true patch's statistics.
        let d = seq.patch_dim();
        let mut out = Vec::with_capacity(tokens.numel());
        for (p, t) in tokens.data().chunks(d).zip(seq.tokens.data().chunks(d)) {
            let n = T::from_usize(d).unwrap_or_else(T::one);
            let mean = t.iter().copied().sum::<T>() / n;
            let var = t.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let sd = (var + crate::tensor::lit(1e-6)).sqrt();
            out.extend(p.iter().map(|&v| v * sd + mean));
        }
        Tensor::new(tokens.shape().to_vec(), out)?
    } else {
        tokens
    };
    let img = unpatchify(&seq)?.cast::<f32>();
    Ok(norm.denormalize(&img).map(|v| v.clamp(0.0, 1.0)))
}

/// Full-resolution pixels at visible patches, low-resolution clues elsewhere.
fn masked_view(images: &Tensor<f32>, mask: &MaskSpec, cfg: &SrmaeConfig) -> Result<Tensor<f32>> {
    let hr = patchify(images, cfg.patch_size)?;
    let lr = patchify(&make_lr_view(images, cfg.scale_factor)?, cfg.patch_size)?;
    let (n, d) = (hr.len(), hr.patch_dim());
    let mut tokens = hr.tokens.data().to_vec();
    for s in 0..mask.batch() {
        for &j in mask.masked(s) {
            let r = (s * n + j) * d;
            tokens[r..r + d].copy_from_slice(&lr.tokens.data()[r..r + d]);
        }
    }
    let seq = PatchSequence {
        tokens: Tensor::new(hr.tokens.shape().to_vec(), tokens)?,
        ..hr
    };
    Ok(unpatchify(&seq)?)
}

fn masked_mse(pred: &Tensor<f32>, images: &Tensor<f32>, mask: &MaskSpec, p: usize) -> Result<Option<f64>> {
    if mask.n_masked() == 0 {
        return Ok(None);
    }
    let (a, b) = (patchify(pred, p)?, patchify(images, p)?);
    let (n, d) = (a.len(), a.patch_dim());
    let mut total = 0.0;
    for s in 0..mask.batch() {
        for &j in mask.masked(s) {
            let r = (s * n + j) * d;
            for k in r..r + d {
                total += (a.tokens.data()[k] as f64 - b.tokens.data()[k] as f64).powi(2);
            }
        }
    }
    Ok(Some(total / (mask.batch() * mask.n_masked() * d) as f64))
}

fn sample(t: &Tensor<f32>, i: usize) -> Tensor<f32> {
    let s = t.shape();
    let per: usize = s[1..].iter().product();
    Tensor::new(s[1..].to_vec(), t.data()[i * per..(i + 1) * per].to_vec()).expect("sample slice")
}

/// Side-by-side RGB image of `[C,H,W]` panes; gray panes are replicated
/// across the three channels.
fn triptych(panes: &[Tensor<f32>; 3]) -> Tensor<f32> {
    let s = panes[0].shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let ow = 3 * w;
    let mut out = vec![0.0f32; 3 * h * ow];
    for (k, pane) in panes.iter().enumerate() {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            for r in 0..h {
                for col in 0..w {
                    out[(ch * h + r) * ow + k * w + col] = pane.data()[(src * h + r) * w + col];
                }
            }
        }
    }
    Tensor::new(vec![3, h, ow], out).expect("triptych shape")
}

fn inspect_job(req: &JobRequest) -> Result<JobOutput> {
    let summary = match (&req.init, &req.config) {
        (Some(path), _) => inspect_path(path, req)?,
        (None, Some(_)) => config_summary(&resolve_config(req, None)?, None),
        (None, None) => return Err(Error::Config("inspect needs a checkpoint, manifest or config path".into())),
    };
    Ok(JobOutput::Inspect { summary })
}

fn config_map(cfg: &RunConfig) -> BTreeMap<String, String> {
    cfg.to_canonical_text()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn config_summary(cfg: &RunConfig, meta: Option<&BTreeMap<String, String>>) -> serde_json::Value {
    let m = &cfg.model;
    let mut v = json!({
        "kind": if meta.is_some() { "manifest" } else { "config" },
        "digest": cfg.digest(),
        "num_patches": m.num_patches(),
        "n_visible": crate::masking::visible_count(m.num_patches(), m.mask_ratio),
        "pretrain_parameters": m.param_count(false),
        "config": config_map(cfg),
    });
    if let Some(meta) = meta {
        v["meta"] = json!(meta);
    }
    v
}

fn inspect_path(path: &Path, req: &JobRequest) -> Result<serde_json::Value> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        let ck = Checkpoint::<f64>::from_bytes(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("header checked"));
        let tensors: Vec<_> = ck
            .params
            .iter()
            .map(|(name, p)| json!({"name": name, "shape": p.value.shape(), "trainable": p.trainable}))
            .collect();
        let scalars: usize = ck.params.iter().map(|(_, p)| p.value.numel()).sum();
        return Ok(json!({
            "kind": "checkpoint",
            "path": path,
            "format_version": version,
            "reader_version": FORMAT_VERSION,
            "dtype": stored_dtype(&bytes).map(DType::name),
            "mode": ck.config.train.mode.name(),
            "epoch": ck.state.epoch,
            "global_step": ck.state.global_step,
            "optimizer_step": ck.moments.step,
            "parameters": scalars,
            "tensors": tensors,
            "has_prediction_head": ck.params.iter().any(|(n, _)| n.starts_with(HEAD_PREFIX)),
            "has_classifier": ck.params.contains("cls.weight"),
            "norm": ck.norm,
            "config_digest": ck.config.digest(),
            "config": config_map(&ck.config),
        }));
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::ingestion(path, "neither a checkpoint nor a text config"))?;
    if text.starts_with(MANIFEST_HEADER) {
        let m = parse_manifest(&text)?;
        return Ok(config_summary(&m.config, Some(&m.meta)));
    }
    let req = JobRequest {
        config: Some(text),
        init: None,
        ..req.clone()
    };
    Ok(config_summary(&resolve_config(&req, None)?, None))
}

/// JSON bodies exchanged between the job service and its clients.
pub mod api {
    use serde::{Deserialize, Serialize};

    use super::{Command, JobOutput};
    use crate::error::Error;
    use crate::train::Event;

    pub const JOBS_PATH: &str = "/v1/jobs";
    pub const HEALTH_PATH: &str = "/health";

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Health {
        pub status: String,
        pub version: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Submitted {
        pub id: u64,
    }

    /// A failed job, carrying the exit code the command line should use.
    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
    #[error("{message}")]
    pub struct ApiError {
        pub kind: String,
        pub exit_code: i32,
        pub message: String,
    }

    impl From<&Error> for ApiError {
        fn from(e: &Error) -> Self {
            ApiError {
                kind: e.kind().into(),
                exit_code: e.exit_code(),
                message: e.to_string(),
            }
        }
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(rename_all = "lowercase")]
    pub enum JobState {
        Running,
        Succeeded,
        Failed,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct JobStatus {
        pub id: u64,
        pub command: Command,
        pub state: JobState,
        pub events: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub output: Option<JobOutput>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub error: Option<ApiError>,
    }

    /// Events `[from, next)` of a job; `done` once no more will arrive.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EventPage {
        pub events: Vec<Event>,
        pub next: usize,
        pub done: bool,
    }
}
