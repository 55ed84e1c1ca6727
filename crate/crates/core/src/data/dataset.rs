use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::formats;
use super::ImageBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Supported on-disk layouts plus the built-in synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataFormat {
    Synthetic,
    RawTensorDir,
    NetpbmDir,
    IdxPair,
}

impl DataFormat {
    pub fn name(self) -> &'static str {
        match self {
            DataFormat::Synthetic => "synthetic",
            DataFormat::RawTensorDir => "raw-tensor-dir",
            DataFormat::NetpbmDir => "netpbm-dir",
            DataFormat::IdxPair => "idx-pair",
        }
    }
}

impl std::fmt::Display for DataFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "synthetic" => Ok(DataFormat::Synthetic),
            "raw-tensor-dir" => Ok(DataFormat::RawTensorDir),
            "netpbm-dir" => Ok(DataFormat::NetpbmDir),
            "idx-pair" => Ok(DataFormat::IdxPair),
            other => Err(format!(
                "unknown data format `{other}` (expected synthetic, raw-tensor-dir, netpbm-dir or idx-pair)"
            )),
        }
    }
}

/// Per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn apply(&self, pixels: &Tensor<f32>, inverse: bool) -> Tensor<f32> {
        let s = pixels.shape();
        let (c, plane) = (s[1], s[2] * s[3]);
        let mut out = pixels.data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let (m, sd) = (self.mean[i % c], self.std[i % c]);
            for v in chunk {
                *v = if inverse { *v * sd + m } else { (*v - m) / sd };
            }
        }
        Tensor::new(s.to_vec(), out).expect("same shape")
    }

    pub fn normalize(&self, pixels: &Tensor<f32>) -> Tensor<f32> {
        self.apply(pixels, false)
    }

    pub fn denormalize(&self, pixels: &Tensor<f32>) -> Tensor<f32> {
        self.apply(pixels, true)
    }
}

/// An in-memory image collection `[N,C,H,W]` with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Tensor<f32>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(pixels: Tensor<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        if pixels.rank() != 4 {
            return Err(Error::Config(format!("dataset tensor must be [N,C,H,W], got {:?}", pixels.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != pixels.shape()[0] {
                return Err(Error::ingestion(
                    "<memory>",
                    format!("{} labels for {} images", l.len(), pixels.shape()[0]),
                ));
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

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.pixels.shape();
        [s[1], s[2], s[3]]
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Gathers the given images into one batch; labels follow their images.
    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let [c, h, w] = self.image_shape();
        let img = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * img);
        for &i in indices {
            data.extend_from_slice(&self.pixels.data()[i * img..(i + 1) * img]);
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        ImageBatch::new(
            Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent shape"),
            labels,
        )
        .expect("labels match")
    }

    /// Batches in `order`; the last batch may be partial.
    pub fn batches<'a>(&'a self, order: &'a [usize], batch_size: usize) -> impl Iterator<Item = ImageBatch> + 'a {
        order.chunks(batch_size.max(1)).map(move |chunk| self.batch(chunk))
    }

    pub fn shuffled_order(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
    }

    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let b = self.batch(&idx);
        Dataset {
            pixels: b.pixels,
            labels: b.labels,
        }
    }

    pub fn channel_stats(&self) -> NormStats {
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for (i, chunk) in self.pixels.data().chunks(plane).enumerate() {
            for &v in chunk {
                sum[i % c] += v as f64;
                sq[i % c] += (v as f64) * (v as f64);
            }
        }
        let n = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        NormStats {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(&bad) = self.labels().and_then(|l| l.iter().find(|&&y| y >= num_classes)) {
            return Err(Error::ingestion(
                "<dataset>",
                format!("label {bad} out of range for {num_classes} classes"),
            ));
        }
        Ok(())
    }
}

fn sorted_files(root: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && exts.contains(&ext) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// `labels.txt`: one class index per line, aligned with sorted file names.
fn read_label_file(root: &Path, count: usize) -> Result<Option<Vec<usize>>> {
    let path = root.join("labels.txt");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let labels: Vec<usize> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse()
                .map_err(|_| Error::ingestion(&path, format!("line {}: `{l}` is not a class index", i + 1)))
        })
        .collect::<Result<_>>()?;
    if labels.len() != count {
        return Err(Error::ingestion(&path, format!("{} labels for {count} images", labels.len())));
    }
    Ok(Some(labels))
}

fn stack(images: Vec<(PathBuf, Tensor<f32>)>, root: &Path) -> Result<Tensor<f32>> {
    let Some((_, first)) = images.first() else {
        return Err(Error::ingestion(root, "no images found"));
    };
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for (path, img) in &images {
        if img.shape() != shape.as_slice() {
            return Err(Error::ingestion(
                path,
                format!("image shape {:?} differs from {:?}", img.shape(), shape),
            ));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Ok(Tensor::new(full, data)?)
}

fn find_idx(root: &Path) -> Result<(PathBuf, Option<PathBuf>)> {
    let (dir, prefix) = if root.is_dir() {
        (root.to_path_buf(), String::new())
    } else {
        let dir = root.parent().unwrap_or(Path::new(".")).to_path_buf();
        let prefix = root.file_name().and_then(|f| f.to_str()).unwrap_or("").to_string();
        (dir, prefix)
    };
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let name = path.file_name().and_then(|f| f.to_str()).unwrap_or("").to_string();
        if !name.starts_with(&prefix) {
            continue;
        }
        if name.contains("idx3") {
            images.push(path);
        } else if name.contains("idx1") {
            labels.push(path);
        }
    }
    match (images.len(), labels.len()) {
        (1, 0 | 1) => Ok((images.remove(0), labels.pop())),
        (0, _) => Err(Error::ingestion(root, "no idx3 image file found")),
        _ => Err(Error::ingestion(root, "ambiguous idx files; point data.root at a file prefix")),
    }
}

/// Loads a whole dataset into memory. Files are read in sorted name order.
pub fn load_dataset(root: &Path, format: DataFormat) -> Result<Dataset> {
    match format {
        DataFormat::Synthetic => Err(Error::Config("synthetic data is generated, not loaded".into())),
        DataFormat::RawTensorDir | DataFormat::NetpbmDir => {
            type Reader = fn(&Path) -> Result<Tensor<f32>>;
            let (exts, read): (&[&str], Reader) = match format {
                DataFormat::RawTensorDir => (&["srt"], formats::read_srt),
                _ => (&["pgm", "ppm", "pnm"], formats::read_pnm),
            };
            let files = sorted_files(root, exts)?;
            let images = files
                .into_iter()
                .map(|p| read(&p).map(|t| (p, t)))
                .collect::<Result<Vec<_>>>()?;
            let labels = read_label_file(root, images.len())?;
            Dataset::new(stack(images, root)?, labels)
        }
        DataFormat::IdxPair => {
            let (img_path, label_path) = find_idx(root)?;
            let idx = formats::read_idx(&img_path)?;
            if idx.dims.len() != 3 {
                return Err(Error::ingestion(&img_path, format!("expected idx3 [N,H,W], got {:?}", idx.dims)));
            }
            let (n, h, w) = (idx.dims[0], idx.dims[1], idx.dims[2]);
            let pixels = Tensor::new(vec![n, 1, h, w], idx.data.iter().map(|&b| b as f32 / 255.0).collect())?;
            let labels = match label_path {
                Some(lp) => {
                    let l = formats::read_idx(&lp)?;
                    if l.dims.len() != 1 || l.dims[0] != n {
                        return Err(Error::ingestion(&lp, format!("label dims {:?} vs {n} images", l.dims)));
                    }
                    Some(l.data.iter().map(|&b| b as usize).collect())
                }
                None => None,
            };
            Dataset::new(pixels, labels)
        }
    }
}
