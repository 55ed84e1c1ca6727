use rand::Rng;

use super::kernels as k;
use super::tape::BackwardOp;
use super::{lit, Scalar, Tensor, Var};
use crate::error::TensorError;

type Grads<T> = Result<Vec<Option<Tensor<T>>>, TensorError>;

macro_rules! op_name {
    ($name:literal) => {
        fn name(&self) -> &'static str {
            $name
        }
    };
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

struct Binary {
    kind: BinKind,
}

impl<T: Scalar> BackwardOp<T> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        }
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        let (a, b) = (inputs[0], inputs[1]);
        let (ga, gb) = match self.kind {
            BinKind::Add => (g.clone(), g.clone()),
            BinKind::Sub => (g.clone(), g.map(|v| -v)),
            BinKind::Mul => (
                k::broadcast_binary("mul", g, b, |x, y| x * y)?,
                k::broadcast_binary("mul", g, a, |x, y| x * y)?,
            ),
        };
        Ok(vec![
            Some(k::reduce_to_shape(&ga, a.shape())),
            Some(k::reduce_to_shape(&gb, b.shape())),
        ])
    }
}

struct Affine<T> {
    mul: T,
}

impl<T: Scalar> BackwardOp<T> for Affine<T> {
    op_name!("scalar_affine");

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        Ok(vec![Some(k::scale(g, self.mul))])
    }
}

struct Sin;

impl<T: Scalar> BackwardOp<T> for Sin {
    op_name!("sin");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        let d = inputs[0].data().iter().zip(g.data()).map(|(&x, &g)| x.cos() * g).collect();
        Ok(vec![Some(Tensor::from_parts(g.shape().to_vec(), d))])
    }
}

struct Matmul;

impl<T: Scalar> BackwardOp<T> for Matmul {
    op_name!("matmul");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        let (da, db) = k::matmul_backward(inputs[0], inputs[1], g, true, true);
        Ok(vec![da, db])
    }
}

struct Softmax {
    axis: usize,
}

impl<T: Scalar> BackwardOp<T> for Softmax {
    op_name!("softmax");

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        Ok(vec![Some(k::softmax_backward(out, g, self.axis))])
    }
}

struct LayerNorm<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> BackwardOp<T> for LayerNorm<T> {
    op_name!("layernorm");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let d = gamma.numel();
        let gm = gamma.data();
        let mut dx = vec![T::zero(); x.numel()];
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        let inv_d: T = lit(1.0 / d as f64);
        for (r, ((grow, xrow), dxrow)) in g
            .data()
            .chunks(d)
            .zip(self.xhat.chunks(d))
            .zip(dx.chunks_mut(d))
            .enumerate()
        {
            let mut mean_dxhat = T::zero();
            let mut mean_dxhat_xhat = T::zero();
            for i in 0..d {
                let dxh = grow[i] * gm[i];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xrow[i];
                dgamma[i] += grow[i] * xrow[i];
                dbeta[i] += grow[i];
            }
            mean_dxhat *= inv_d;
            mean_dxhat_xhat *= inv_d;
            let rs = self.rstd[r];
            for i in 0..d {
                dxrow[i] = rs * (grow[i] * gm[i] - mean_dxhat - xrow[i] * mean_dxhat_xhat);
            }
        }
        Ok(vec![
            Some(Tensor::from_parts(x.shape().to_vec(), dx)),
            Some(Tensor::from_parts(vec![d], dgamma)),
            Some(Tensor::from_parts(vec![d], dbeta)),
        ])
    }
}

struct Gelu;

impl<T: Scalar> BackwardOp<T> for Gelu {
    op_name!("gelu");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        let d = inputs[0]
            .data()
            .iter()
            .zip(g.data())
            .map(|(&x, &g)| k::gelu_grad_scalar(x) * g)
            .collect();
        Ok(vec![Some(Tensor::from_parts(g.shape().to_vec(), d))])
    }
}

struct Conv2d {
    stride: usize,
    pad: usize,
}

impl<T: Scalar> BackwardOp<T> for Conv2d {
    op_name!("conv2d");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        let (dx, dw, db) = k::conv2d_backward(inputs[0], inputs[1], g, self.stride, self.pad);
        Ok(vec![Some(dx), Some(dw), Some(db)])
    }
}

struct Nearest;

impl<T: Scalar> BackwardOp<T> for Nearest {
    op_name!("interpolate_nearest");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        Ok(vec![Some(k::interpolate_nearest_backward(inputs[0].shape(), g))])
    }
}

struct Area {
    factor: usize,
}

impl<T: Scalar> BackwardOp<T> for Area {
    op_name!("downsample_area");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        Ok(vec![Some(k::downsample_area_backward(inputs[0].shape(), g, self.factor))])
    }
}

struct Reshape;

impl<T: Scalar> BackwardOp<T> for Reshape {
    op_name!("reshape");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        Ok(vec![Some(g.reshape(inputs[0].shape())?)])
    }
}

struct Permute {
    axes: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for Permute {
    op_name!("permute");

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        Ok(vec![Some(k::permute(g, &k::inverse_permutation(&self.axes))?)])
    }
}

struct Concat {
    axis: usize,
}

impl<T: Scalar> BackwardOp<T> for Concat {
    op_name!("concat");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        let mut start = 0;
        inputs
            .iter()
            .map(|x| {
                let len = x.shape()[self.axis];
                let part = k::narrow(g, self.axis, start, len)?;
                start += len;
                Ok(Some(part))
            })
            .collect()
    }
}

struct IndexSelect {
    axis: usize,
    idx: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for IndexSelect {
    op_name!("index_select");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        Ok(vec![Some(k::index_add(inputs[0].shape(), self.axis, &self.idx, g))])
    }
}

struct GatherRows {
    idx: Vec<usize>,
    m: usize,
}

impl<T: Scalar> BackwardOp<T> for GatherRows {
    op_name!("gather_rows");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        Ok(vec![Some(k::scatter_rows(inputs[0].shape(), &self.idx, self.m, g))])
    }
}

struct SumAll<T> {
    scale: T,
}

impl<T: Scalar> BackwardOp<T> for SumAll<T> {
    op_name!("sum");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), g.item() * self.scale))])
    }
}

struct SumAxis<T> {
    axis: usize,
    scale: T,
}

impl<T: Scalar> BackwardOp<T> for SumAxis<T> {
    op_name!("sum_axis");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        let e = k::expand_axis(g, inputs[0].shape(), self.axis);
        Ok(vec![Some(k::scale(&e, self.scale))])
    }
}

struct Mse;

impl<T: Scalar> BackwardOp<T> for Mse {
    op_name!("mse");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        let (a, b) = (inputs[0], inputs[1]);
        let s: T = g.item() * lit(2.0 / a.numel() as f64);
        let da: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * s).collect();
        let db = da.iter().map(|&v| -v).collect();
        Ok(vec![
            Some(Tensor::from_parts(a.shape().to_vec(), da)),
            Some(Tensor::from_parts(b.shape().to_vec(), db)),
        ])
    }
}

struct Dropout<T> {
    mask: Vec<T>,
}

impl<T: Scalar> BackwardOp<T> for Dropout<T> {
    op_name!("dropout");

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        let d = g.data().iter().zip(&self.mask).map(|(&g, &m)| g * m).collect();
        Ok(vec![Some(Tensor::from_parts(g.shape().to_vec(), d))])
    }
}

struct CrossEntropy<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for CrossEntropy<T> {
    op_name!("cross_entropy");

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Grads<T> {
        let shape = inputs[0].shape();
        let (b, c) = (shape[0], shape[1]);
        let s = g.item() / lit(b as f64);
        let mut d = self.probs.clone();
        for (i, &y) in self.labels.iter().enumerate() {
            d[i * c + y] -= T::one();
        }
        d.iter_mut().for_each(|v| *v *= s);
        Ok(vec![Some(Tensor::from_parts(shape.to_vec(), d))])
    }
}

// Tape ops return Result, so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, rhs: Var<'t, T>, kind: BinKind, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        let op = Binary { kind };
        let out = k::broadcast_binary(BackwardOp::<T>::name(&op), &self.value(), &rhs.value(), f)?;
        self.tape().record(out, &[self, rhs], op)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, rhs: Var<'t, T>) -> Result<Self, TensorError> {
        self.binary(rhs, BinKind::Add, |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Self, TensorError> {
        self.binary(rhs, BinKind::Sub, |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Self, TensorError> {
        self.binary(rhs, BinKind::Mul, |a, b| a * b)
    }

    /// `self * mul + add`, elementwise with scalar constants.
    pub fn affine(self, mul: T, add: T) -> Result<Self, TensorError> {
        let out = self.value().map(|v| v * mul + add);
        self.tape().record(out, &[self], Affine { mul })
    }

    pub fn scale(self, s: T) -> Result<Self, TensorError> {
        self.affine(s, T::zero())
    }

    pub fn add_scalar(self, s: T) -> Result<Self, TensorError> {
        self.affine(T::one(), s)
    }

    pub fn square(self) -> Result<Self, TensorError> {
        self.mul(self)
    }

    pub fn sin(self) -> Result<Self, TensorError> {
        let out = self.value().map(|v| v.sin());
        self.tape().record(out, &[self], Sin)
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Self, TensorError> {
        let out = k::matmul(&self.value(), &rhs.value())?;
        self.tape().record(out, &[self, rhs], Matmul)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Self, TensorError> {
        let out = k::softmax(&self.value(), axis)?;
        self.tape().record(out, &[self], Softmax { axis })
    }

    /// Layer normalization over the last axis followed by `gamma * x + beta`.
    pub fn layernorm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Self, TensorError> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&0);
        let (g, b) = (gamma.value(), beta.value());
        if g.shape() != [d] || b.shape() != [d] {
            return Err(TensorError::Shape {
                op: "layernorm",
                detail: format!("gamma {:?} / beta {:?} vs input {:?}", g.shape(), b.shape(), x.shape()),
            });
        }
        let (xhat, rstd) = k::layernorm_normalize(&x, eps);
        let out: Vec<T> = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g.data()).zip(b.data()).map(|((&v, &g), &b)| v * g + b))
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        self.tape().record(out, &[self, gamma, beta], LayerNorm { xhat, rstd })
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(self) -> Result<Self, TensorError> {
        let out = self.value().map(k::gelu_scalar);
        self.tape().record(out, &[self], Gelu)
    }

    /// 2D cross-correlation of `[B,C,H,W]` with `[O,C,kh,kw]` plus bias `[O]`.
    pub fn conv2d(self, w: Var<'t, T>, b: Var<'t, T>, stride: usize, padding: usize) -> Result<Self, TensorError> {
        let out = k::conv2d(&self.value(), &w.value(), Some(&b.value()), stride, padding)?;
        self.tape().record(out, &[self, w, b], Conv2d { stride, pad: padding })
    }

    pub fn interpolate_nearest(self, out_h: usize, out_w: usize) -> Result<Self, TensorError> {
        let out = k::interpolate_nearest(&self.value(), out_h, out_w)?;
        self.tape().record(out, &[self], Nearest)
    }

    pub fn downsample_area(self, factor: usize) -> Result<Self, TensorError> {
        let out = k::downsample_area(&self.value(), factor)?;
        self.tape().record(out, &[self], Area { factor })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        let out = self.value().reshape(shape)?;
        self.tape().record(out, &[self], Reshape)
    }

    pub fn permute(self, axes: &[usize]) -> Result<Self, TensorError> {
        let out = k::permute(&self.value(), axes)?;
        self.tape().record(out, &[self], Permute { axes: axes.to_vec() })
    }

    pub fn transpose(self, a: usize, b: usize) -> Result<Self, TensorError> {
        let mut axes: Vec<usize> = (0..self.shape().len()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(TensorError::Shape {
                op: "transpose",
                detail: format!("axes ({a}, {b}) out of range for {:?}", self.shape()),
            });
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn index_select(self, axis: usize, idx: &[usize]) -> Result<Self, TensorError> {
        let out = k::index_select(&self.value(), axis, idx)?;
        self.tape().record(out, &[self], IndexSelect { axis, idx: idx.to_vec() })
    }

    /// Per-sample token gather on `[B,N,D]`; `idx` holds `m` rows per sample.
    pub fn gather_rows(self, idx: &[usize], m: usize) -> Result<Self, TensorError> {
        let out = k::gather_rows(&self.value(), idx, m)?;
        self.tape().record(out, &[self], GatherRows { idx: idx.to_vec(), m })
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self, TensorError> {
        let idx: Vec<usize> = (start..start + len).collect();
        if axis < self.shape().len() && start + len > self.shape()[axis] {
            return Err(TensorError::Shape {
                op: "narrow",
                detail: format!("range {start}..{} on axis {axis} of {:?}", start + len, self.shape()),
            });
        }
        self.index_select(axis, &idx)
    }

    pub fn sum(self) -> Result<Self, TensorError> {
        let out = Tensor::scalar(self.value().sum_all());
        self.tape().record(out, &[self], SumAll { scale: T::one() })
    }

    pub fn mean(self) -> Result<Self, TensorError> {
        let v = self.value();
        let scale = T::one() / lit(v.numel().max(1) as f64);
        let out = Tensor::scalar(v.sum_all() * scale);
        self.tape().record(out, &[self], SumAll { scale })
    }

    pub fn sum_axis(self, axis: usize) -> Result<Self, TensorError> {
        let out = k::sum_axis(&self.value(), axis)?;
        self.tape().record(out, &[self], SumAxis { axis, scale: T::one() })
    }

    pub fn mean_axis(self, axis: usize) -> Result<Self, TensorError> {
        let v = self.value();
        let len = *v.shape().get(axis).unwrap_or(&1);
        let scale = T::one() / lit(len.max(1) as f64);
        let out = k::scale(&k::sum_axis(&v, axis)?, scale);
        self.tape().record(out, &[self], SumAxis { axis, scale })
    }

    /// Mean squared difference over all elements.
    pub fn mse(self, target: Var<'t, T>) -> Result<Self, TensorError> {
        let (a, b) = (self.value(), target.value());
        if a.shape() != b.shape() {
            return Err(TensorError::shape("mse", a.shape(), b.shape()));
        }
        let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / lit(a.numel().max(1) as f64));
        self.tape().record(out, &[self, target], Mse)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(self, p: f64, rng: &mut impl Rng) -> Result<Self, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::config("dropout", format!("probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(self);
        }
        let v = self.value();
        let keep: T = lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..v.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        );
        self.tape().record(out, &[self], Dropout { mask })
    }

    /// Mean cross-entropy of `[B,C]` logits against class indices.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Self, TensorError> {
        let v = self.value();
        if v.rank() != 2 || v.shape()[0] != labels.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                detail: format!("logits {:?} vs {} labels", v.shape(), labels.len()),
            });
        }
        let c = v.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::config("cross_entropy", format!("label {bad} >= {c} classes")));
        }
        let probs = k::softmax(&v, 1)?;
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &v.data()[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln();
            loss += lse - row[y];
        }
        let out = Tensor::scalar(loss / lit(labels.len().max(1) as f64));
        self.tape().record(
            out,
            &[self],
            CrossEntropy {
                probs: probs.into_vec(),
                labels: labels.to_vec(),
            },
        )
    }
}

/// Concatenates along `axis`.
pub fn concat<'t, T: Scalar>(xs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>, TensorError> {
    let first = xs.first().ok_or_else(|| TensorError::Shape {
        op: "concat",
        detail: "no inputs".into(),
    })?;
    let values: Vec<Tensor<T>> = xs.iter().map(|v| v.value()).collect();
    let refs: Vec<&Tensor<T>> = values.iter().collect();
    let out = k::concat(&refs, axis)?;
    first.tape().record(out, xs, Concat { axis })
}
