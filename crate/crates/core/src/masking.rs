//! Random patch masking and the permutation bookkeeping around it.
//!
//! A [`MaskSpec`] holds one permutation of `0..N` per sample. The first
//! `n_visible` entries of each permutation are the patches the encoder sees;
//! the rest are the masked positions that receive low-resolution tokens in
//! the prediction head.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PatchSequence;
use crate::error::TensorError;
use crate::tensor::{concat, kernels, Scalar, Var};

/// Number of kept patches: `round_half_up(n * (1 - ratio))`, at least one.
pub fn visible_count(n: usize, ratio: f64) -> usize {
    let kept = (n as f64 * (1.0 - ratio) + 0.5 + 1e-9).floor() as usize;
    kept.clamp(1, n)
}

/// Serialized replay key of a mask: `(N, ratio, seed)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskKey {
    pub n: usize,
    pub ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    n: usize,
    ratio: f64,
    n_visible: usize,
    perms: Vec<Vec<usize>>,
    seed: Option<u64>,
}

fn validate(n: usize, ratio: f64) -> Result<(), TensorError> {
    if n < 2 {
        return Err(TensorError::config("generate_mask", format!("need at least 2 patches, got {n}")));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(TensorError::config(
            "generate_mask",
            format!("mask ratio {ratio} not in [0, 1); at least one patch must stay visible"),
        ));
    }
    Ok(())
}

impl MaskSpec {
    /// Draws `batch` independent uniform permutations.
    pub fn generate(batch: usize, n: usize, ratio: f64, rng: &mut impl Rng) -> Result<Self, TensorError> {
        validate(n, ratio)?;
        let perms = (0..batch)
            .map(|_| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        Ok(Self {
            n,
            ratio,
            n_visible: visible_count(n, ratio),
            perms,
            seed: None,
        })
    }

    /// Deterministic mask replayable from `(N, ratio, seed)`.
    pub fn from_seed(batch: usize, n: usize, ratio: f64, seed: u64) -> Result<Self, TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::generate(batch, n, ratio, &mut rng)?;
        m.seed = Some(seed);
        Ok(m)
    }

    /// Builds a mask from explicit permutations.
    pub fn from_perms(perms: Vec<Vec<usize>>, n_visible: usize) -> Result<Self, TensorError> {
        let n = perms.first().map_or(0, Vec::len);
        if n_visible == 0 || n_visible > n {
            return Err(TensorError::config("mask", format!("n_visible {n_visible} not in 1..={n}")));
        }
        for p in &perms {
            let mut seen = vec![false; n];
            if p.len() != n || p.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
                return Err(TensorError::config("mask", format!("{p:?} is not a permutation of 0..{n}")));
            }
        }
        Ok(Self {
            n,
            ratio: 1.0 - n_visible as f64 / n as f64,
            n_visible,
            perms,
            seed: None,
        })
    }

    pub fn key(&self) -> Option<MaskKey> {
        self.seed.map(|seed| MaskKey {
            n: self.n,
            ratio: self.ratio,
            seed,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.n
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn n_visible(&self) -> usize {
        self.n_visible
    }

    pub fn n_masked(&self) -> usize {
        self.n - self.n_visible
    }

    pub fn batch(&self) -> usize {
        self.perms.len()
    }

    pub fn perm(&self, sample: usize) -> &[usize] {
        &self.perms[sample]
    }

    pub fn visible(&self, sample: usize) -> &[usize] {
        &self.perms[sample][..self.n_visible]
    }

    pub fn masked(&self, sample: usize) -> &[usize] {
        &self.perms[sample][self.n_visible..]
    }

    /// Binary mask `M` for one sample: 1 = visible, 0 = masked.
    pub fn binary(&self, sample: usize) -> Vec<u8> {
        let mut m = vec![0u8; self.n];
        for &i in self.visible(sample) {
            m[i] = 1;
        }
        m
    }

    /// Visible indices of every sample, concatenated (gather order).
    pub fn visible_flat(&self) -> Vec<usize> {
        self.perms.iter().flat_map(|p| p[..self.n_visible].iter().copied()).collect()
    }

    pub fn masked_flat(&self) -> Vec<usize> {
        self.perms.iter().flat_map(|p| p[self.n_visible..].iter().copied()).collect()
    }

    /// For each sample, where original position `j` sits in permuted order.
    pub fn inverse_flat(&self) -> Vec<usize> {
        let mut inv = vec![0; self.n * self.perms.len()];
        for (b, p) in self.perms.iter().enumerate() {
            for (k, &j) in p.iter().enumerate() {
                inv[b * self.n + j] = k;
            }
        }
        inv
    }

    /// Restricts to a contiguous range of samples.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            perms: self.perms[start..start + len].to_vec(),
            seed: None,
            ..self.clone()
        }
    }

    fn check_tokens(&self, op: &'static str, shape: &[usize]) -> Result<(), TensorError> {
        if shape.len() != 3 || shape[0] != self.batch() || shape[1] != self.n {
            return Err(TensorError::Shape {
                op,
                detail: format!("tokens {shape:?} vs mask of {} samples x {} patches", self.batch(), self.n),
            });
        }
        Ok(())
    }
}

/// Gathers the visible tokens of a patch sequence; also returns the masked
/// positions of each sample (concatenated).
pub fn split_visible<T: Scalar>(
    seq: &PatchSequence<T>,
    m: &MaskSpec,
) -> Result<(PatchSequence<T>, Vec<usize>), TensorError> {
    m.check_tokens("split_visible", seq.tokens.shape())?;
    let tokens = kernels::gather_rows(&seq.tokens, &m.visible_flat(), m.n_visible())?;
    Ok((
        PatchSequence {
            tokens,
            ..seq.clone()
        },
        m.masked_flat(),
    ))
}

/// Differentiable gather of the visible tokens of `[B,N,D]`.
pub fn gather_visible<'t, T: Scalar>(tokens: Var<'t, T>, m: &MaskSpec) -> Result<Var<'t, T>, TensorError> {
    m.check_tokens("split_visible", &tokens.shape())?;
    tokens.gather_rows(&m.visible_flat(), m.n_visible())
}

/// Differentiable gather of the masked tokens of `[B,N,D]`.
pub fn gather_masked<'t, T: Scalar>(tokens: Var<'t, T>, m: &MaskSpec) -> Result<Var<'t, T>, TensorError> {
    m.check_tokens("gather_masked", &tokens.shape())?;
    tokens.gather_rows(&m.masked_flat(), m.n_masked())
}

/// Reassembles the full token set in original grid order: position `j` takes
/// the visible token when `M_j = 1` and the low-resolution token otherwise.
pub fn splice_full<'t, T: Scalar>(
    visible: Var<'t, T>,
    lr: Var<'t, T>,
    m: &MaskSpec,
) -> Result<Var<'t, T>, TensorError> {
    let (vs, ls) = (visible.shape(), lr.shape());
    if vs.len() != 3 || ls.len() != 3 || vs[0] != m.batch() || ls[0] != m.batch() {
        return Err(TensorError::Shape {
            op: "splice_full",
            detail: format!("visible {vs:?}, lr {ls:?}, mask batch {}", m.batch()),
        });
    }
    if vs[1] != m.n_visible() || ls[1] != m.n_masked() {
        return Err(TensorError::Shape {
            op: "splice_full",
            detail: format!(
                "expected {} visible and {} lr tokens, got {} and {}",
                m.n_visible(),
                m.n_masked(),
                vs[1],
                ls[1]
            ),
        });
    }
    if vs[2] != ls[2] {
        return Err(TensorError::Shape {
            op: "splice_full",
            detail: format!("token dims differ: visible {} vs lr {}", vs[2], ls[2]),
        });
    }
    let permuted = if m.n_masked() == 0 {
        visible
    } else {
        concat(&[visible, lr], 1)?
    };
    permuted.gather_rows(&m.inverse_flat(), m.num_patches())
}
