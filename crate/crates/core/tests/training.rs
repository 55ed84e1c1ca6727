use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srmae_core::config::RunConfig;
use srmae_core::data::{synthetic_digits, Dataset, DigitStyle, NormStats};
use srmae_core::masking::MaskSpec;
use srmae_core::model::{SrmaeConfig, SrmaeModel};
use srmae_core::tensor::Tensor;
use srmae_core::train::{
    checkpoint_path, evaluate, finetune, load_checkpoint, load_splits, make_shards, pretrain, resize_for_eval,
    sharded_gradients, top_k, MetricRecord, MetricsSink, Splits,
};

/// Tiny model on 16×16 synthetic digits with the given overrides.
fn tiny(overrides: &[(&str, &str)]) -> RunConfig {
    let mut cfg = RunConfig {
        model: SrmaeConfig::tiny(),
        ..RunConfig::default()
    };
    for (k, v) in [("data.train_size", "64"), ("data.test_size", "0"), ("train.warmup_epochs", "0")] {
        cfg.set(k, v).unwrap();
    }
    for (k, v) in overrides {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn timeless(records: &[MetricRecord]) -> Vec<MetricRecord> {
    records.iter().map(MetricRecord::timeless).collect()
}

fn step_losses(sink: &MetricsSink, phase: &str) -> Vec<f64> {
    sink.phase(phase).iter().map(|r| r.loss).collect()
}

#[test]
fn one_epoch_emits_a_loss_record_per_batch() {
    let cfg = tiny(&[("train.epochs", "1"), ("train.batch_size", "16")]);
    let splits = load_splits(&cfg).unwrap();
    let mut sink = MetricsSink::memory();
    pretrain::<f32>(&cfg, &splits, None, &mut sink, None).unwrap();
    let steps = sink.phase("pretrain");
    assert_eq!(steps.len(), 64 / 16);
    assert_eq!(sink.phase("pretrain_epoch").len(), 1);
    assert!(steps.iter().all(|r| r.loss.is_finite() && r.lr >= 0.0 && r.top1.is_none()));
    let ids: Vec<u64> = steps.iter().map(|r| r.step).collect();
    assert_eq!(ids, vec![1, 2, 3, 4]);
}

#[test]
fn fixed_seed_reproduces_loss_curve_bit_exactly() {
    let run = |seed: &str| {
        let cfg = tiny(&[("train.epochs", "2"), ("train.batch_size", "16"), ("train.seed", seed)]);
        let splits = load_splits(&cfg).unwrap();
        let mut sink = MetricsSink::memory();
        let ck = pretrain::<f32>(&cfg, &splits, None, &mut sink, None).unwrap();
        (timeless(sink.records()), ck.to_bytes())
    };
    let (a, ca) = run("3");
    let (b, cb) = run("3");
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let (c, _) = run("4");
    assert_ne!(a, c);
}

#[test]
fn resumed_pretraining_reproduces_next_ten_losses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[
        ("data.train_size", "80"),
        ("train.epochs", "2"),
        ("train.batch_size", "8"),
        ("train.warmup_epochs", "1"),
        ("train.ckpt_every", "1"),
    ]);
    let splits = load_splits(&cfg).unwrap();
    let mut full = MetricsSink::memory();
    pretrain::<f32>(&cfg, &splits, None, &mut full, Some(dir.path())).unwrap();
    let uninterrupted = step_losses(&full, "pretrain");
    assert_eq!(uninterrupted.len(), 20);

    let ck = load_checkpoint::<f32>(&checkpoint_path(dir.path(), 1)).unwrap();
    assert_eq!(ck.state.epoch, 1);
    let mut resumed = MetricsSink::memory();
    pretrain::<f32>(&cfg, &splits, Some(ck), &mut resumed, None).unwrap();
    let next = step_losses(&resumed, "pretrain");
    assert_eq!(next.len(), 10);
    for (i, (a, b)) in uninterrupted[10..].iter().zip(&next).enumerate() {
        assert_eq!(a.to_bits(), b.to_bits(), "step {} after resume", i + 1);
    }
    assert_eq!(
        timeless(&full.phase("pretrain")[10..].iter().map(|r| (*r).clone()).collect::<Vec<_>>()),
        timeless(&resumed.phase("pretrain").iter().map(|r| (*r).clone()).collect::<Vec<_>>())
    );
}

#[test]
fn resumed_finetuning_reproduces_next_losses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[
        ("train.mode", "finetune"),
        ("data.test_size", "16"),
        ("train.epochs", "2"),
        ("train.batch_size", "16"),
        ("train.ckpt_every", "1"),
    ]);
    let splits = load_splits(&cfg).unwrap();
    let mut full = MetricsSink::memory();
    finetune::<f32>(&cfg, &splits, None, &mut full, Some(dir.path())).unwrap();
    let ck = load_checkpoint::<f32>(&checkpoint_path(dir.path(), 1)).unwrap();
    let mut resumed = MetricsSink::memory();
    finetune::<f32>(&cfg, &splits, Some(ck), &mut resumed, None).unwrap();
    assert_eq!(step_losses(&full, "finetune")[4..], step_losses(&resumed, "finetune")[..]);
    assert_eq!(
        full.phase("finetune_epoch")[1].top1,
        resumed.phase("finetune_epoch")[0].top1
    );
}

fn random_batch(cfg: &SrmaeConfig, b: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let ds = synthetic_digits(seed, 0, b, &DigitStyle::new(cfg.image_height, cfg.channels));
    let pixels = ds.pixels().cast();
    (pixels, ds.labels().unwrap().to_vec())
}

fn max_abs_diff(a: &BTreeMap<String, Tensor<f64>>, b: &BTreeMap<String, Tensor<f64>>) -> f64 {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    a.iter()
        .flat_map(|(k, t)| t.data().iter().zip(b[k].data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn micro_batches_accumulate_to_the_full_batch_gradient() {
    let cfg = SrmaeConfig::tiny();
    let model = SrmaeModel::<f64>::new(cfg.clone(), 5).unwrap();
    let (pixels, labels) = random_batch(&cfg, 8, 2);
    let mask = MaskSpec::from_seed(8, cfg.num_patches(), cfg.mask_ratio, 9).unwrap();

    let (loss, grads) = sharded_gradients(&model, &make_shards(&pixels, Some(&mask), None, 0, 1)).unwrap();
    for micro in [1, 3, 4] {
        let (l, g) = sharded_gradients(&model, &make_shards(&pixels, Some(&mask), None, micro, 1)).unwrap();
        assert!((l - loss).abs() < 1e-5, "micro {micro}: loss {l} vs {loss}");
        assert!(max_abs_diff(&g, &grads) < 1e-5, "micro {micro}");
    }

    let clf = SrmaeModel::<f64>::classifier(cfg, 5).unwrap();
    let (loss, grads) = sharded_gradients(&clf, &make_shards(&pixels, None, Some(&labels), 0, 1)).unwrap();
    let (l, g) = sharded_gradients(&clf, &make_shards(&pixels, None, Some(&labels), 3, 1)).unwrap();
    assert!((l - loss).abs() < 1e-5);
    assert!(max_abs_diff(&g, &grads) < 1e-5);
}

#[test]
fn repeated_batch_loss_is_monotone_after_warmup() {
    let cfg = tiny(&[
        ("train.mode", "finetune"),
        ("data.train_size", "16"),
        ("train.batch_size", "16"),
        ("train.epochs", "60"),
        ("train.warmup_epochs", "5"),
        ("train.base_lr", "3e-4"),
        ("aug.crop_scale_min", "1"),
    ]);
    let splits = load_splits(&cfg).unwrap();
    let mut sink = MetricsSink::memory();
    finetune::<f64>(&cfg, &splits, None, &mut sink, None).unwrap();
    let losses = step_losses(&sink, "finetune");
    assert_eq!(losses.len(), 60);
    let after = &losses[5..];
    let steps = after.len() - 1;
    let ok = after.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(ok as f64 >= 0.95 * steps as f64, "{ok}/{steps} non-increasing: {losses:?}");
    assert!(losses[59] < losses[0]);
}

#[test]
fn frozen_tensors_survive_training_bit_identical() {
    let cfg = tiny(&[("train.epochs", "2"), ("train.batch_size", "16")]);
    let splits = load_splits(&cfg).unwrap();
    let init = SrmaeModel::<f32>::new(cfg.model.clone(), cfg.train.seed).unwrap();
    let ck = pretrain::<f32>(&cfg, &splits, None, &mut MetricsSink::memory(), None).unwrap();
    let mut frozen = 0;
    for (name, p) in init.params.iter() {
        let after = &ck.params.get(name).unwrap().value;
        if p.trainable {
            continue;
        }
        frozen += 1;
        assert_eq!(p.value.data(), after.data(), "{name} moved");
    }
    assert!(frozen >= 2);
    assert!(ck.params.get("head.pred.weight").unwrap().value.data().iter().any(|&v| v != 0.0));
}

#[test]
fn scratch_and_pretrained_init_differ_only_in_encoder_weights() {
    let pre_cfg = tiny(&[("train.epochs", "1"), ("train.batch_size", "16")]);
    let splits = load_splits(&pre_cfg).unwrap();
    let pre = pretrain::<f32>(&pre_cfg, &splits, None, &mut MetricsSink::memory(), None).unwrap();

    // One epoch at a vanishing learning rate exposes the initial state.
    let cfg = tiny(&[
        ("train.mode", "finetune"),
        ("train.epochs", "1"),
        ("train.base_lr", "1e-30"),
        ("train.weight_decay", "0"),
    ]);
    let mut sink = MetricsSink::memory();
    let from_pre = finetune::<f32>(&cfg, &splits, Some(pre.clone()), &mut sink, None).unwrap();
    let from_scratch = finetune::<f32>(&cfg, &splits, None, &mut MetricsSink::memory(), None).unwrap();
    assert!(sink.notes().iter().any(|n| n.contains("prediction head discarded")));
    assert_eq!(from_pre.params.names(), from_scratch.params.names());
    assert!(from_pre.params.names().iter().all(|n| !n.starts_with("head.")));
    for (name, p) in from_scratch.params.iter() {
        let q = &from_pre.params.get(name).unwrap().value;
        assert_eq!(p.value.shape(), q.shape(), "{name}");
        if name.starts_with("cls.") {
            assert!(max_abs_f32(&p.value, q) < 1e-20, "{name}");
        } else {
            assert!(max_abs_f32(&pre.params.get(name).unwrap().value, q) < 1e-20, "{name}");
        }
    }
}

fn max_abs_f32(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

#[test]
fn label_outside_class_range_is_an_ingestion_error() {
    let cfg = tiny(&[("train.mode", "finetune"), ("train.epochs", "1"), ("model.num_classes", "5")]);
    let splits = load_splits(&cfg).unwrap();
    let err = finetune::<f32>(&cfg, &splits, None, &mut MetricsSink::memory(), None).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}

#[test]
fn overfits_a_hundred_images() {
    let cfg = tiny(&[
        ("train.mode", "finetune"),
        ("model.enc_dim", "32"),
        ("model.enc_heads", "4"),
        ("data.train_size", "100"),
        ("train.batch_size", "20"),
        ("train.epochs", "100"),
        ("train.warmup_epochs", "5"),
        ("train.base_lr", "3e-3"),
        ("train.weight_decay", "0"),
        ("aug.crop_scale_min", "1"),
    ]);
    let splits = load_splits(&cfg).unwrap();
    let ck = finetune::<f32>(&cfg, &splits, None, &mut MetricsSink::memory(), None).unwrap();
    let report = evaluate(&ck.model(), &splits.train, &ck.norm, 0, 50).unwrap();
    assert!(report.top1 >= 0.99, "train accuracy {}", report.top1);
}

fn held_out(n: usize, size: usize) -> Dataset {
    synthetic_digits(77, 0, n, &DigitStyle::new(size, 1))
}

#[test]
fn random_classifier_is_at_chance() {
    let cfg = SrmaeConfig::tiny();
    let ds = held_out(1000, cfg.image_height);
    let norm = ds.channel_stats();
    for seed in 0..3 {
        let model = SrmaeModel::<f32>::classifier(cfg.clone(), seed).unwrap();
        let r = evaluate(&model, &ds, &norm, 0, 100).unwrap();
        assert_eq!(r.count, 1000);
        assert!((r.top1 - 0.10).abs() <= 0.03, "seed {seed}: top1 {}", r.top1);
        assert!(r.top5.unwrap() >= r.top1);
    }
}

#[test]
fn top5_never_below_top1() {
    let cfg = tiny(&[("train.mode", "finetune"), ("data.test_size", "64"), ("train.epochs", "3"), ("train.batch_size", "16")]);
    let splits = load_splits(&cfg).unwrap();
    let ck = finetune::<f32>(&cfg, &splits, None, &mut MetricsSink::memory(), None).unwrap();
    let test = splits.test.as_ref().unwrap();
    for res in [0, 8, 4] {
        let r = evaluate(&ck.model(), test, &ck.norm, res, 16).unwrap();
        assert!(r.top5.unwrap() >= r.top1, "resolution {res}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let row: Vec<f64> = (0..10).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let top5 = top_k(&row, 5);
        let best = (0..10).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(top5[0], best);
        assert!(top5.windows(2).all(|w| row[w[0]] >= row[w[1]]));
    }
}

#[test]
fn constant_logits_score_the_majority_frequency() {
    let cfg = SrmaeConfig::tiny();
    // A skewed set: all digits, then extra copies of class 3.
    let base = held_out(200, cfg.image_height);
    let labels = base.labels().unwrap();
    let mut idx: Vec<usize> = (0..200).collect();
    idx.extend((0..200).filter(|&i| labels[i] == 3));
    let b = base.batch(&idx);
    let ds = Dataset::new(b.pixels, b.labels).unwrap();

    let mut counts = [0usize; 10];
    for &l in ds.labels().unwrap() {
        counts[l] += 1;
    }
    let majority = (0..10).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
    assert_eq!(majority, 3);

    let mut model = SrmaeModel::<f32>::classifier(cfg, 0).unwrap();
    let w = model.params.get_mut("cls.weight").unwrap();
    w.value = Tensor::zeros(w.value.shape());
    let bias = model.params.get_mut("cls.bias").unwrap();
    let logits: Vec<f64> = (0..10).map(|c| if c == majority { 1.0 } else { -(c as f64) }).collect();
    bias.value = Tensor::from_f64(&[10], &logits).unwrap();

    let r = evaluate(&model, &ds, &NormStats::identity(1), 0, 64).unwrap();
    let want = counts[majority] as f64 / ds.len() as f64;
    assert!((r.top1 - want).abs() < 1e-12, "{} vs {want}", r.top1);
}

#[test]
fn eval_resolution_follows_the_low_resolution_protocol() {
    let ds = held_out(4, 16);
    let px = ds.pixels();
    assert_eq!(resize_for_eval(px, 0).unwrap().data(), px.data());
    assert_eq!(resize_for_eval(px, 16).unwrap().data(), px.data());
    let low = resize_for_eval(px, 8).unwrap();
    assert_eq!(low.shape(), px.shape());
    for img in low.data().chunks(256) {
        for r in (0..16).step_by(2) {
            for c in (0..16).step_by(2) {
                let v = img[r * 16 + c];
                assert_eq!([img[r * 16 + c + 1], img[(r + 1) * 16 + c], img[(r + 1) * 16 + c + 1]], [v; 3]);
            }
        }
    }
}

#[test]
fn coarser_evaluation_loses_accuracy() {
    let cfg = tiny(&[
        ("train.mode", "finetune"),
        ("model.enc_dim", "32"),
        ("model.enc_heads", "4"),
        ("data.train_size", "800"),
        ("data.test_size", "200"),
        ("train.epochs", "15"),
        ("train.warmup_epochs", "1"),
        ("train.batch_size", "32"),
        ("train.base_lr", "3e-3"),
    ]);
    let splits: Splits = load_splits(&cfg).unwrap();
    let ck = finetune::<f32>(&cfg, &splits, None, &mut MetricsSink::memory(), None).unwrap();
    let test = splits.test.as_ref().unwrap();
    let native = evaluate(&ck.model(), test, &ck.norm, 0, 50).unwrap().top1;
    let coarse = evaluate(&ck.model(), test, &ck.norm, 4, 50).unwrap().top1;
    assert!(native > 0.3, "native accuracy {native}");
    assert!(coarse < native, "4px {coarse} vs native {native}");
}
