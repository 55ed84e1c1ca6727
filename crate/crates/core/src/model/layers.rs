use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{trunc_normal, xavier_uniform, Bound, ParamStore};
use crate::error::TensorError;
use crate::tensor::{lit, Scalar, Tensor, Var};

pub(crate) const PROJ_STD: f64 = 0.02;

/// Per-forward state: dropout randomness and optional attention capture.
pub struct ForwardCtx<'r> {
    rng: Option<&'r mut ChaCha8Rng>,
    dropout: f64,
    attention: Option<Vec<AttentionTrace>>,
}

/// Attention probabilities `[B,heads,n,n]` of one layer, widened to f64.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub layer: String,
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
}

impl AttentionTrace {
    /// Largest deviation of any attention row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let n = *self.shape.last().unwrap_or(&1);
        self.weights
            .chunks(n.max(1))
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

impl<'r> ForwardCtx<'r> {
    /// Deterministic forward: no dropout, no capture.
    pub fn eval() -> Self {
        Self {
            rng: None,
            dropout: 0.0,
            attention: None,
        }
    }

    pub fn train(rng: &'r mut ChaCha8Rng, dropout: f64) -> Self {
        Self {
            rng: Some(rng),
            dropout,
            attention: None,
        }
    }

    /// Deterministic forward that records every attention map.
    pub fn traced() -> Self {
        Self {
            rng: None,
            dropout: 0.0,
            attention: Some(Vec::new()),
        }
    }

    pub fn take_attention(&mut self) -> Vec<AttentionTrace> {
        self.attention.take().unwrap_or_default()
    }

    fn dropout<'t, T: Scalar>(&mut self, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => x.dropout(self.dropout, rng),
            _ => Ok(x),
        }
    }
}

pub(crate) fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    din: usize,
    dout: usize,
    zero: bool,
    rng: &mut impl Rng,
) {
    let w = if zero {
        Tensor::zeros(&[din, dout])
    } else {
        xavier_uniform(din, dout, rng)
    };
    store.insert(format!("{prefix}.weight"), w, true);
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]), true);
}

pub(crate) fn init_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.weight"), Tensor::ones(&[d]), true);
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]), true);
}

/// Conv weights `[cout,cin,k,k]`, truncated normal with std `1/sqrt(fan_in)`.
pub(crate) fn init_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    zero: bool,
    rng: &mut impl Rng,
) {
    let shape = [cout, cin, k, k];
    let w = if zero {
        Tensor::zeros(&shape)
    } else {
        trunc_normal(&shape, 1.0 / ((cin * k * k) as f64).sqrt(), rng)
    };
    store.insert(format!("{prefix}.weight"), w, true);
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]), true);
}

pub(crate) fn init_block<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, mlp_ratio: usize, rng: &mut impl Rng) {
    init_norm(store, &format!("{prefix}.norm1"), d);
    init_linear(store, &format!("{prefix}.attn.qkv"), d, 3 * d, false, rng);
    init_linear(store, &format!("{prefix}.attn.proj"), d, d, false, rng);
    init_norm(store, &format!("{prefix}.norm2"), d);
    init_linear(store, &format!("{prefix}.mlp.fc1"), d, d * mlp_ratio, false, rng);
    init_linear(store, &format!("{prefix}.mlp.fc2"), d * mlp_ratio, d, false, rng);
}

pub(crate) fn linear<'t, T: Scalar>(p: &Bound<'t, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
    x.matmul(p.get(&format!("{prefix}.weight")))?
        .add(p.get(&format!("{prefix}.bias")))
}

pub(crate) fn norm<'t, T: Scalar>(p: &Bound<'t, T>, prefix: &str, x: Var<'t, T>, eps: f64) -> Result<Var<'t, T>, TensorError> {
    x.layernorm(p.get(&format!("{prefix}.weight")), p.get(&format!("{prefix}.bias")), lit(eps))
}

pub(crate) fn conv<'t, T: Scalar>(
    p: &Bound<'t, T>,
    prefix: &str,
    x: Var<'t, T>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>, TensorError> {
    x.conv2d(
        p.get(&format!("{prefix}.weight")),
        p.get(&format!("{prefix}.bias")),
        stride,
        padding,
    )
}

/// Multi-head self-attention on `[B,n,d]`.
pub(crate) fn attention<'t, T: Scalar>(
    p: &Bound<'t, T>,
    prefix: &str,
    x: Var<'t, T>,
    heads: usize,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var<'t, T>, TensorError> {
    let s = x.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    let hd = d / heads;
    let qkv = linear(p, &format!("{prefix}.qkv"), x)?
        .reshape(&[b, n, 3, heads, hd])?
        .permute(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| qkv.narrow(0, i, 1)?.reshape(&[b, heads, n, hd]);
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let scores = q.matmul(k.transpose(2, 3)?)?.scale(lit(1.0 / (hd as f64).sqrt()))?;
    let probs = scores.softmax(3)?;
    if let Some(traces) = ctx.attention.as_mut() {
        let value = probs.value();
        traces.push(AttentionTrace {
            layer: prefix.to_string(),
            shape: value.shape().to_vec(),
            weights: value.to_f64_vec(),
        });
    }
    let out = probs.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, d])?;
    linear(p, &format!("{prefix}.proj"), out)
}

/// Pre-norm transformer block.
pub(crate) fn block<'t, T: Scalar>(
    p: &Bound<'t, T>,
    prefix: &str,
    x: Var<'t, T>,
    heads: usize,
    eps: f64,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var<'t, T>, TensorError> {
    let run = |ctx: &mut ForwardCtx<'_>| -> Result<Var<'t, T>, TensorError> {
        let a = attention(p, &format!("{prefix}.attn"), norm(p, &format!("{prefix}.norm1"), x, eps)?, heads, ctx)?;
        let h = x.add(ctx.dropout(a)?)?;
        let hidden = linear(p, &format!("{prefix}.mlp.fc1"), norm(p, &format!("{prefix}.norm2"), h, eps)?)?.gelu()?;
        let m = linear(p, &format!("{prefix}.mlp.fc2"), ctx.dropout(hidden)?)?;
        h.add(ctx.dropout(m)?)
    };
    run(ctx).map_err(|e| e.within(prefix))
}
