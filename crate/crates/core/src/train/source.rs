use std::path::Path;

use crate::config::{AugConfig, RunConfig};
use crate::data::{horizontal_flip, load_dataset, random_resized_crop, synthetic_digits, DataFormat, Dataset, DigitStyle, ImageBatch};
use crate::error::{Error, Result};
use crate::model::SrmaeConfig;

/// Training images plus an optional held-out split.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

fn check_geometry(ds: &Dataset, model: &SrmaeConfig, what: &str) -> Result<()> {
    let want = [model.channels, model.image_height, model.image_width];
    if ds.image_shape() != want {
        return Err(Error::Mismatch(format!(
            "{what} images are {:?} (C,H,W) but the model expects {:?}",
            ds.image_shape(),
            want
        )));
    }
    Ok(())
}

fn tail_split(ds: Dataset, test_size: usize) -> (Dataset, Option<Dataset>) {
    if test_size == 0 || test_size >= ds.len() {
        return (ds, None);
    }
    let cut = ds.len() - test_size;
    let train_idx: Vec<usize> = (0..cut).collect();
    let test_idx: Vec<usize> = (cut..ds.len()).collect();
    let to_ds = |b: ImageBatch| Dataset::new(b.pixels, b.labels).expect("consistent batch");
    (to_ds(ds.batch(&train_idx)), Some(to_ds(ds.batch(&test_idx))))
}

/// Builds the splits named by the `data.*` keys and checks them against the
/// model geometry.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    let m = &cfg.model;
    let splits = match d.format {
        DataFormat::Synthetic => {
            if m.image_height != m.image_width {
                return Err(Error::Config("synthetic digits are square; set image_height = image_width".into()));
            }
            let style = DigitStyle::new(m.image_height, m.channels);
            let test = (d.test_size > 0).then(|| synthetic_digits(d.seed, d.train_size, d.test_size, &style));
            Splits {
                train: synthetic_digits(d.seed, 0, d.train_size, &style),
                test,
            }
        }
        format => {
            let all = load_dataset(Path::new(&d.root), format)?;
            if d.test_root.is_empty() {
                let (train, test) = tail_split(all, d.test_size);
                Splits { train, test }
            } else {
                Splits {
                    train: all,
                    test: Some(load_dataset(Path::new(&d.test_root), format)?),
                }
            }
        }
    };
    if splits.train.is_empty() {
        return Err(Error::ingestion(&d.root, "training split is empty"));
    }
    check_geometry(&splits.train, m, "training")?;
    if let Some(t) = &splits.test {
        check_geometry(t, m, "held-out")?;
    }
    Ok(splits)
}

/// Random resized crop back to the input extent, then horizontal flip.
pub fn augment(batch: ImageBatch, aug: &AugConfig, rng: &mut impl rand::Rng) -> Result<ImageBatch> {
    let mut b = batch;
    if aug.crop_scale_min < 1.0 {
        let out = (b.height(), b.width());
        b = random_resized_crop(&b, out, (aug.crop_scale_min, aug.crop_scale_max), rng)?;
    }
    if aug.flip_p > 0.0 {
        b = horizontal_flip(&b, aug.flip_p, rng)?;
    }
    Ok(b)
}
