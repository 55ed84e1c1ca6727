use std::collections::BTreeMap;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{save_checkpoint, Checkpoint, RngState, TrainState};
use super::metrics::{MetricRecord, MetricsSink};
use super::optim::{adamw_step, AdamW, Moments};
use super::schedule::cosine_lr;
use super::source::{augment, Splits};
use crate::config::{Mode, RunConfig};
use crate::data::{Dataset, NormStats};
use crate::error::{Error, Result, TensorError};
use crate::masking::MaskSpec;
use crate::model::{ForwardCtx, ParamStore, SrmaeModel, CLS_PREFIX, HEAD_PREFIX};
use crate::tensor::{kernels, Scalar, Tape, Tensor};

/// Stream of the master training RNG; model init uses streams 0 and 1 of
/// the same seed.
const TRAIN_STREAM: u64 = 2;

/// One data-parallel gradient shard.
pub struct Shard<T> {
    pub pixels: Tensor<T>,
    pub mask: Option<MaskSpec>,
    pub labels: Option<Vec<usize>>,
    /// Fraction of the full batch, `len / B`.
    pub weight: f64,
    pub dropout_seed: u64,
    pub index: u64,
}

/// Loss and summed gradients over shards, combined in shard order so the
/// result does not depend on how many threads ran them.
pub fn sharded_gradients<T: Scalar>(
    model: &SrmaeModel<T>,
    shards: &[Shard<T>],
) -> std::result::Result<(f64, BTreeMap<String, Tensor<T>>), TensorError> {
    let dropout = model.config.dropout;
    let parts: Vec<(f64, BTreeMap<String, Tensor<T>>)> = shards
        .par_iter()
        .map(|s| {
            let tape = Tape::new();
            let net = model.bind(&tape);
            let mut rng = ChaCha8Rng::seed_from_u64(s.dropout_seed);
            rng.set_stream(s.index);
            let mut ctx = if dropout > 0.0 {
                ForwardCtx::train(&mut rng, dropout)
            } else {
                ForwardCtx::eval()
            };
            let loss = match (&s.mask, &s.labels) {
                (Some(m), _) => net.pretrain_images(&s.pixels, m, &mut ctx)?.loss,
                (None, Some(labels)) => net
                    .classify_forward(tape.constant(s.pixels.clone()), &mut ctx)?
                    .cross_entropy(labels)?,
                (None, None) => return Err(TensorError::Usage("shard has neither mask nor labels".into())),
            };
            tape.backward(loss)?;
            let value = loss.value().item().to_f64().unwrap_or(f64::NAN);
            Ok((value, net.params().grads()))
        })
        .collect::<std::result::Result<_, TensorError>>()?;

    let mut total_loss = 0.0;
    let mut total: BTreeMap<String, Vec<T>> = BTreeMap::new();
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (s, (loss, grads)) in shards.iter().zip(parts) {
        total_loss += s.weight * loss;
        let w: T = crate::tensor::lit(s.weight);
        for (name, g) in grads {
            let acc = total.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.numel()]);
            for (a, &v) in acc.iter_mut().zip(g.data()) {
                *a += w * v;
            }
            shapes.entry(name).or_insert_with(|| g.shape().to_vec());
        }
    }
    let grads = total
        .into_iter()
        .map(|(name, data)| {
            let shape = shapes.remove(&name).expect("shape recorded");
            (name, Tensor::new(shape, data).expect("consistent gradient"))
        })
        .collect();
    Ok((total_loss, grads))
}

fn rows<T: Scalar>(t: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Tensor::new(shape, t.data()[start * per..(start + len) * per].to_vec()).expect("row slice")
}

/// Splits a batch into shards of at most `micro` samples.
pub fn make_shards<T: Scalar>(
    pixels: &Tensor<T>,
    mask: Option<&MaskSpec>,
    labels: Option<&[usize]>,
    micro: usize,
    dropout_seed: u64,
) -> Vec<Shard<T>> {
    let b = pixels.shape()[0];
    (0..b)
        .step_by(micro.max(1))
        .enumerate()
        .map(|(i, start)| {
            let len = micro.max(1).min(b - start);
            Shard {
                pixels: rows(pixels, start, len),
                mask: mask.map(|m| m.slice(start, len)),
                labels: labels.map(|l| l[start..start + len].to_vec()),
                weight: len as f64 / b as f64,
                dropout_seed,
                index: i as u64,
            }
        })
        .collect()
}

fn optimizer(cfg: &RunConfig) -> AdamW {
    AdamW {
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.eps,
        weight_decay: cfg.train.weight_decay,
    }
}

/// Fails unless every tensor of `found` outside `skip` prefixes exists in
/// `expected` with the same shape, and vice versa.
pub fn check_compatible<T: Scalar>(expected: &ParamStore<T>, found: &ParamStore<T>, skip: &[&str]) -> Result<()> {
    let keep = |n: &str| !skip.iter().any(|p| n.starts_with(p));
    for (name, p) in expected.iter().filter(|(n, _)| keep(n)) {
        match found.get(name) {
            None => {
                return Err(Error::Mismatch(format!(
                    "checkpoint lacks `{name}` (config expects shape {:?})",
                    p.value.shape()
                )))
            }
            Some(f) if f.value.shape() != p.value.shape() => {
                return Err(Error::Mismatch(format!(
                    "`{name}`: checkpoint has shape {:?} but the config expects {:?}",
                    f.value.shape(),
                    p.value.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some((name, f)) = found.iter().find(|(n, _)| keep(n) && !expected.contains(n)) {
        return Err(Error::Mismatch(format!(
            "checkpoint has `{name}` with shape {:?}, which the config does not define",
            f.value.shape()
        )));
    }
    Ok(())
}

struct LoopState<T> {
    model: SrmaeModel<T>,
    moments: Moments<T>,
    norm: NormStats,
    rng: ChaCha8Rng,
    epoch: u64,
    global_step: u64,
}

impl<T: Scalar> LoopState<T> {
    fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint<T> {
        Checkpoint {
            config: cfg.clone(),
            params: self.model.params.clone(),
            moments: self.moments.clone(),
            norm: self.norm.clone(),
            state: TrainState {
                epoch: self.epoch,
                global_step: self.global_step,
                rng: RngState::capture(&self.rng),
            },
        }
    }
}

fn fresh_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);
    rng
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> std::path::PathBuf {
    dir.join(format!("epoch_{epoch:04}.srmk"))
}

/// Per-batch normalization and dtype conversion.
fn prepare<T: Scalar>(pixels: &Tensor<f32>, norm: &NormStats) -> Tensor<T> {
    norm.normalize(pixels).cast()
}

fn run_epochs<T: Scalar>(
    cfg: &RunConfig,
    splits: &Splits,
    st: &mut LoopState<T>,
    sink: &mut MetricsSink,
    ckpt_dir: Option<&Path>,
) -> Result<()> {
    let mode = cfg.train.mode;
    let phase = mode.name();
    let train = &splits.train;
    if mode == Mode::Finetune && train.labels().is_none() {
        return Err(Error::ingestion(&cfg.data.root, "fine-tuning needs labels"));
    }
    if mode == Mode::Finetune {
        train.check_labels(cfg.model.num_classes)?;
    }
    let bs = cfg.train.batch_size;
    let steps_per_epoch = train.len().div_ceil(bs);
    let total = cfg.train.epochs * steps_per_epoch;
    let warmup = cfg.train.warmup_epochs * steps_per_epoch;
    let opt = optimizer(cfg);
    let n_patches = cfg.model.num_patches();
    if let Some(dir) = ckpt_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    while (st.epoch as usize) < cfg.train.epochs {
        let order = train.shuffled_order(&mut st.rng);
        let (mut loss_sum, mut seen, mut lr) = (0.0, 0usize, 0.0);
        for chunk in order.chunks(bs) {
            let last_good = (st.model.params.clone(), st.moments.clone(), RngState::capture(&st.rng));
            let batch = augment(train.batch(chunk), &cfg.aug, &mut st.rng)?;
            let pixels: Tensor<T> = prepare(&batch.pixels, &st.norm);
            let mask = match mode {
                Mode::Pretrain => Some(MaskSpec::generate(chunk.len(), n_patches, cfg.model.mask_ratio, &mut st.rng)?),
                _ => None,
            };
            let dropout_seed = st.rng.next_u64();
            lr = cosine_lr(
                st.global_step as usize + 1,
                total,
                warmup,
                cfg.train.base_lr,
                cfg.train.min_lr,
            );
            let shards = make_shards(
                &pixels,
                mask.as_ref(),
                batch.labels.as_deref(),
                cfg.micro_batch(),
                dropout_seed,
            );
            let step = sharded_gradients(&st.model, &shards)
                .map_err(Error::from)
                .and_then(|(loss, grads)| {
                    if !loss.is_finite() {
                        return Err(Error::Numeric(format!("{phase} loss is {loss}")));
                    }
                    adamw_step(&mut st.model.params, &grads, &mut st.moments, lr, &opt)?;
                    Ok(loss)
                });
            let loss = match step {
                Ok(l) => l,
                Err(e) if e.kind() == "numeric" => {
                    let (params, moments, rng) = last_good;
                    let good = Checkpoint {
                        config: cfg.clone(),
                        params,
                        moments,
                        norm: st.norm.clone(),
                        state: TrainState {
                            epoch: st.epoch,
                            global_step: st.global_step,
                            rng,
                        },
                    };
                    let saved = match ckpt_dir {
                        Some(dir) => {
                            let p = dir.join("last_good.srmk");
                            save_checkpoint(&good, &p)?;
                            format!("; last good state saved to {}", p.display())
                        }
                        None => String::new(),
                    };
                    return Err(Error::Numeric(format!(
                        "{e} at epoch {} step {}{saved}",
                        st.epoch,
                        st.global_step + 1
                    )));
                }
                Err(e) => return Err(e),
            };
            st.global_step += 1;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            sink.emit(MetricRecord {
                phase: phase.to_string(),
                epoch: st.epoch,
                step: st.global_step,
                loss,
                lr,
                top1: None,
                top5: None,
                wall_ms: sink.elapsed_ms(),
            })?;
        }

        let (top1, top5) = match (mode, &splits.test) {
            (Mode::Finetune, Some(test)) => {
                let r = evaluate(&st.model, test, &st.norm, cfg.train.eval_resolution, bs)?;
                (Some(r.top1), r.top5)
            }
            _ => (None, None),
        };
        sink.emit(MetricRecord {
            phase: format!("{phase}_epoch"),
            epoch: st.epoch,
            step: st.global_step,
            loss: loss_sum / seen.max(1) as f64,
            lr,
            top1,
            top5,
            wall_ms: sink.elapsed_ms(),
        })?;
        st.epoch += 1;

        if let Some(dir) = ckpt_dir {
            let every = cfg.train.ckpt_every;
            if (every > 0 && st.epoch.is_multiple_of(every as u64)) || st.epoch as usize == cfg.train.epochs {
                let path = checkpoint_path(dir, st.epoch);
                save_checkpoint(&st.checkpoint(cfg), &path)?;
                sink.note(format!("checkpoint written to {}", path.display()));
            }
        }
    }
    Ok(())
}

/// Masked-reconstruction pretraining. `init` resumes from a pretraining
/// checkpoint; training continues until `train.epochs` epochs are complete.
pub fn pretrain<T: Scalar>(
    cfg: &RunConfig,
    splits: &Splits,
    init: Option<Checkpoint<T>>,
    sink: &mut MetricsSink,
    ckpt_dir: Option<&Path>,
) -> Result<Checkpoint<T>> {
    let mut cfg = cfg.clone();
    cfg.train.mode = Mode::Pretrain;
    cfg.validate()?;
    let fresh = SrmaeModel::<T>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut st = match init {
        None => LoopState {
            model: fresh,
            moments: Moments::default(),
            norm: splits.train.channel_stats(),
            rng: fresh_rng(cfg.train.seed),
            epoch: 0,
            global_step: 0,
        },
        Some(ck) => {
            if ck.config.train.mode != Mode::Pretrain || !ck.params.contains("head.pred.weight") {
                return Err(Error::Mismatch("pretraining can only resume from a pretraining checkpoint".into()));
            }
            check_compatible(&fresh.params, &ck.params, &[])?;
            sink.note(format!("resuming pretraining after epoch {}", ck.state.epoch));
            LoopState {
                model: SrmaeModel {
                    config: cfg.model.clone(),
                    params: ck.params,
                },
                moments: ck.moments,
                norm: ck.norm,
                rng: ck.state.rng.restore(),
                epoch: ck.state.epoch,
                global_step: ck.state.global_step,
            }
        }
    };
    run_epochs(&cfg, splits, &mut st, sink, ckpt_dir)?;
    Ok(st.checkpoint(&cfg))
}

/// Supervised fine-tuning of encoder plus a fresh linear head. `init` is a
/// pretraining checkpoint (its prediction head is discarded), a fine-tuning
/// checkpoint to resume, or `None` for a scratch baseline.
pub fn finetune<T: Scalar>(
    cfg: &RunConfig,
    splits: &Splits,
    init: Option<Checkpoint<T>>,
    sink: &mut MetricsSink,
    ckpt_dir: Option<&Path>,
) -> Result<Checkpoint<T>> {
    let mut cfg = cfg.clone();
    cfg.train.mode = Mode::Finetune;
    cfg.validate()?;
    let mut fresh = SrmaeModel::<T>::classifier(cfg.model.clone(), cfg.train.seed)?;
    let mut st = match init {
        None => LoopState {
            model: fresh,
            moments: Moments::default(),
            norm: splits.train.channel_stats(),
            rng: fresh_rng(cfg.train.seed),
            epoch: 0,
            global_step: 0,
        },
        Some(ck) if ck.config.train.mode == Mode::Finetune => {
            check_compatible(&fresh.params, &ck.params, &[])?;
            sink.note(format!("resuming fine-tuning after epoch {}", ck.state.epoch));
            LoopState {
                model: SrmaeModel {
                    config: cfg.model.clone(),
                    params: ck.params,
                },
                moments: ck.moments,
                norm: ck.norm,
                rng: ck.state.rng.restore(),
                epoch: ck.state.epoch,
                global_step: ck.state.global_step,
            }
        }
        Some(ck) => {
            check_compatible(&fresh.params, &ck.params, &[HEAD_PREFIX, CLS_PREFIX])?;
            let dropped = ck.params.iter().filter(|(n, _)| n.starts_with(HEAD_PREFIX)).count();
            for (name, p) in ck.params.iter().filter(|(n, _)| !n.starts_with(HEAD_PREFIX)) {
                fresh.params.insert(name.clone(), p.value.clone(), p.trainable);
            }
            sink.note(format!("prediction head discarded ({dropped} tensors)"));
            LoopState {
                model: fresh,
                moments: Moments::default(),
                norm: ck.norm,
                rng: fresh_rng(cfg.train.seed),
                epoch: 0,
                global_step: 0,
            }
        }
    };
    run_epochs(&cfg, splits, &mut st, sink, ckpt_dir)?;
    Ok(st.checkpoint(&cfg))
}

/// Held-out accuracy summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: Option<f64>,
    /// Mean cross-entropy.
    pub loss: f64,
    pub count: usize,
}

/// The low-resolution protocol: nearest-resize to `resolution` pixels high
/// (width scaled to keep the aspect ratio) and back to the model extent.
/// `0` or the native height leaves images untouched.
pub fn resize_for_eval(pixels: &Tensor<f32>, resolution: usize) -> Result<Tensor<f32>> {
    let (h, w) = (pixels.shape()[2], pixels.shape()[3]);
    if resolution == 0 || resolution == h {
        return Ok(pixels.clone());
    }
    let rw = ((w * resolution) as f64 / h as f64).round().max(1.0) as usize;
    let small = kernels::interpolate_nearest(pixels, resolution, rw)?;
    Ok(kernels::interpolate_nearest(&small, h, w)?)
}

/// Indices of the `k` largest logits, ties broken toward the lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Deterministic single pass over a labeled dataset.
pub fn evaluate<T: Scalar>(
    model: &SrmaeModel<T>,
    ds: &Dataset,
    norm: &NormStats,
    eval_resolution: usize,
    batch_size: usize,
) -> Result<EvalReport> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::ingestion("<dataset>", "evaluation needs labels"))?;
    let k = model.config.num_classes;
    ds.check_labels(k)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let parts: Vec<(usize, usize, f64)> = idx
        .par_chunks(batch_size.max(1))
        .map(|chunk| -> Result<(usize, usize, f64)> {
            let batch = ds.batch(chunk);
            let pixels: Tensor<T> = prepare(&resize_for_eval(&batch.pixels, eval_resolution)?, norm);
            let tape = Tape::new();
            let net = model.bind(&tape);
            let logits = net.classify_forward(tape.constant(pixels), &mut ForwardCtx::eval())?;
            let ce = logits.cross_entropy(&labels[chunk[0]..chunk[0] + chunk.len()])?;
            let values = logits.value().to_f64_vec();
            let (mut c1, mut c5) = (0, 0);
            for (row, &i) in values.chunks(k).zip(chunk) {
                let ranked = top_k(row, 5.min(k));
                c1 += (ranked[0] == labels[i]) as usize;
                c5 += ranked.contains(&labels[i]) as usize;
            }
            let loss = ce.value().item().to_f64().unwrap_or(f64::NAN) * chunk.len() as f64;
            Ok((c1, c5, loss))
        })
        .collect::<Result<_>>()?;
    let n = ds.len().max(1) as f64;
    let (c1, c5, loss) = parts
        .into_iter()
        .fold((0, 0, 0.0), |(a, b, c), (x, y, z)| (a + x, b + y, c + z));
    Ok(EvalReport {
        top1: c1 as f64 / n,
        top5: (k >= 5).then_some(c5 as f64 / n),
        loss: loss / n,
        count: ds.len(),
    })
}
