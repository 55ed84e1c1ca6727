//! Binary checkpoint format.
//!
//! ```text
//! "SRMK" | u32 version
//! section*: tag[4] | u64 length | payload | u32 crc32(payload)
//!   CONF  canonical config text (UTF-8)
//!   TENS  u32 count, then tensors
//!   MOMS  u64 step, u32 count, first-moment tensors, u32 count, second-moment tensors
//!   NORM  u32 channels, f32 means, f32 stds
//!   STAT  u64 epoch, u64 global step, rng seed[32], u64 stream, u128 word position
//! tensor: u32 name length | name | u8 dtype tag | u8 trainable | u32 rank | u64 dims | LE payload
//! ```
//!
//! All integers are little-endian. Maps are written in key order, so equal
//! states produce equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::Moments;
use crate::config::RunConfig;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{ParamStore, SrmaeModel};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SRMK";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: u64,
    pub global_step: u64,
    pub rng: RngState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub params: ParamStore<T>,
    pub moments: Moments<T>,
    pub norm: NormStats,
    pub state: TrainState,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn model(&self) -> SrmaeModel<T> {
        SrmaeModel {
            config: self.config.model.clone(),
            params: self.params.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.cast(),
            moments: self.moments.cast(),
            norm: self.norm.clone(),
            state: self.state,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

        section(&mut out, b"CONF", self.config.to_canonical_text().into_bytes());

        let mut tens = Vec::new();
        put_u32(&mut tens, self.params.len() as u32);
        for (name, p) in self.params.iter() {
            put_tensor(&mut tens, name, &p.value, p.trainable);
        }
        section(&mut out, b"TENS", tens);

        let mut moms = Vec::new();
        moms.extend_from_slice(&self.moments.step.to_le_bytes());
        for map in [&self.moments.first, &self.moments.second] {
            put_u32(&mut moms, map.len() as u32);
            for (name, t) in map {
                put_tensor(&mut moms, name, t, true);
            }
        }
        section(&mut out, b"MOMS", moms);

        let mut norm = Vec::new();
        put_u32(&mut norm, self.norm.mean.len() as u32);
        for v in self.norm.mean.iter().chain(&self.norm.std) {
            norm.extend_from_slice(&v.to_le_bytes());
        }
        section(&mut out, b"NORM", norm);

        let mut stat = Vec::new();
        stat.extend_from_slice(&self.state.epoch.to_le_bytes());
        stat.extend_from_slice(&self.state.global_step.to_le_bytes());
        stat.extend_from_slice(&self.state.rng.seed);
        stat.extend_from_slice(&self.state.rng.stream.to_le_bytes());
        stat.extend_from_slice(&self.state.rng.word_pos.to_le_bytes());
        section(&mut out, b"STAT", stat);
        out
    }

    /// Parses a checkpoint. Tensors stored in another dtype are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "header");
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported by this build (expects {FORMAT_VERSION}); \
                 re-save the checkpoint with a matching release"
            )));
        }
        let mut sections: BTreeMap<[u8; 4], &[u8]> = BTreeMap::new();
        while !r.is_empty() {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let name = String::from_utf8_lossy(&tag).into_owned();
            r.what = "section header";
            let len = r.u64()? as usize;
            let payload = r.take(len).map_err(|_| {
                Error::Checkpoint(format!("truncated file: section {name} declares {len} bytes"))
            })?;
            let crc = r.u32().map_err(|_| Error::Checkpoint(format!("truncated file: section {name} has no checksum")))?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::Checkpoint(format!("section {name} failed its checksum; the file is corrupted")));
            }
            sections.insert(tag, payload);
        }
        let get = |tag: &[u8; 4]| {
            sections.get(tag).copied().ok_or_else(|| {
                Error::Checkpoint(format!(
                    "missing section {} (truncated file?)",
                    String::from_utf8_lossy(tag)
                ))
            })
        };

        let text = std::str::from_utf8(get(b"CONF")?)
            .map_err(|_| Error::Checkpoint("config section is not UTF-8".into()))?;
        let config = RunConfig::parse(text).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;

        let mut r = Reader::new(get(b"TENS")?, "TENS");
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let (name, t, trainable) = r.tensor::<T>()?;
            params.insert(name, t, trainable);
        }

        let mut r = Reader::new(get(b"MOMS")?, "MOMS");
        let step = r.u64()?;
        let mut maps = [BTreeMap::new(), BTreeMap::new()];
        for map in &mut maps {
            for _ in 0..r.u32()? {
                let (name, t, _) = r.tensor::<T>()?;
                map.insert(name, t);
            }
        }
        let [first, second] = maps;

        let mut r = Reader::new(get(b"NORM")?, "NORM");
        let c = r.u32()? as usize;
        let mut vals = Vec::with_capacity(2 * c);
        for _ in 0..2 * c {
            vals.push(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")));
        }
        let std = vals.split_off(c);

        let mut r = Reader::new(get(b"STAT")?, "STAT");
        let epoch = r.u64()?;
        let global_step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));

        Ok(Checkpoint {
            config,
            params,
            moments: Moments { step, first, second },
            norm: NormStats { mean: vals, std },
            state: TrainState {
                epoch,
                global_step,
                rng: RngState { seed, stream, word_pos },
            },
        })
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("srmk.tmp");
    fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// The dtype a checkpoint's parameters were stored in.
pub fn stored_dtype(bytes: &[u8]) -> Option<DType> {
    // First tensor record: header(8) + CONF section, then TENS header.
    let mut r = Reader::new(bytes, "header");
    r.take(8).ok()?;
    loop {
        let tag = r.take(4).ok()?;
        let len = r.u64().ok()? as usize;
        let payload = r.take(len).ok()?;
        r.u32().ok()?;
        if tag == b"TENS" {
            let mut t = Reader::new(payload, "TENS");
            if t.u32().ok()? == 0 {
                return None;
            }
            let n = t.u32().ok()? as usize;
            t.take(n).ok()?;
            return DType::from_tag(t.take(1).ok()?[0]);
        }
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: Vec<u8>) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>, trainable: bool) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(trainable as u8);
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated data in {}", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>, bool)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("tensor name in {} is not UTF-8", self.what)))?;
        let tag = self.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has unknown dtype tag {tag}")))?;
        let trainable = self.take(1)?[0] != 0;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let size = dtype.size_of();
        let raw = self.take(count * size)?;
        let data: Vec<T> = match dtype {
            d if d == T::DTYPE => raw.chunks(size).map(T::read_le).collect(),
            DType::Float32 => raw.chunks(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
            DType::Float64 => raw.chunks(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        Ok((name, t, trainable))
    }
}
