//! Graph-free numeric kernels. Every differentiable op is built from these,
//! and the data pipeline uses them directly on constant tensors.

use super::{lit, numel, strides, Scalar, Tensor};
use crate::error::TensorError;

pub fn add_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
    )
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|v| v * s)
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed with `out_shape`'s rank; broadcast axes get
/// stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let off = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

/// Flat source offsets of every output element under broadcasting.
fn broadcast_index(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let bst = broadcast_strides(shape, out_shape);
    let n = numel(out_shape);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        idx.push(off);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            off += bst[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            off -= bst[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

/// Elementwise binary op with numpy-style broadcasting.
pub fn broadcast_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>, TensorError> {
    if a.shape() == b.shape() {
        return Ok(Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ));
    }
    let out_shape =
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::shape(op, a.shape(), b.shape()))?;
    // Trailing-suffix broadcast (bias add, positional add) is the hot case.
    if out_shape == a.shape() && a.shape().ends_with(b.shape()) {
        let bd = b.data();
        let m = bd.len().max(1);
        let data = a
            .data()
            .chunks(m)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        return Ok(Tensor::from_parts(out_shape, data));
    }
    let ia = broadcast_index(a.shape(), &out_shape);
    let ib = broadcast_index(b.shape(), &out_shape);
    let (ad, bd) = (a.data(), b.data());
    let data = ia.iter().zip(&ib).map(|(&i, &j)| f(ad[i], bd[j])).collect();
    Ok(Tensor::from_parts(out_shape, data))
}

/// Sums `grad` (shaped like a broadcast output) down to `shape`.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = vec![T::zero(); numel(shape)];
    if grad.shape().ends_with(shape) {
        let m = out.len().max(1);
        for chunk in grad.data().chunks(m) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
    } else {
        let idx = broadcast_index(shape, grad.shape());
        for (&i, &g) in idx.iter().zip(grad.data()) {
            out[i] += g;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Batched matmul geometry: `[..a, m, k] x [..b, k, n]`.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    pub a_offsets: Vec<usize>,
    pub b_offsets: Vec<usize>,
    /// `a` is contiguous and `b` has no batch axes: fold batch into rows.
    pub fold_rows: bool,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan, TensorError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(TensorError::Shape {
            op: "matmul",
            detail: format!("operands need rank >= 2, got {a:?} and {b:?}"),
        });
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(TensorError::Shape {
            op: "matmul",
            detail: format!("inner extents differ: {a:?} x {b:?}"),
        });
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape(ba, bb).ok_or_else(|| TensorError::Shape {
        op: "matmul",
        detail: format!("batch extents not broadcastable: {a:?} x {b:?}"),
    })?;
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    let fold_rows = bb.is_empty();
    let (a_offsets, b_offsets) = if fold_rows {
        (Vec::new(), Vec::new())
    } else {
        let ia = broadcast_index(ba, &batch);
        let ib = broadcast_index(bb, &batch);
        (
            ia.into_iter().map(|i| i * m * k).collect(),
            ib.into_iter().map(|i| i * k * n).collect(),
        )
    };
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        a_offsets,
        b_offsets,
        fold_rows,
    })
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let p = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![T::zero(); numel(&p.out_shape)];
    let (ad, bd) = (a.data(), b.data());
    if p.fold_rows {
        let rows = ad.len() / k.max(1);
        if k == 0 {
            return Ok(Tensor::from_parts(p.out_shape, out));
        }
        T::gemm(rows, k, n, T::one(), ad, k as isize, 1, bd, n as isize, 1, T::zero(), &mut out, n as isize, 1);
    } else {
        for (bi, (oa, ob)) in p.a_offsets.iter().zip(&p.b_offsets).enumerate() {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &ad[*oa..],
                k as isize,
                1,
                &bd[*ob..],
                n as isize,
                1,
                T::zero(),
                &mut out[bi * m * n..],
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor::from_parts(p.out_shape, out))
}

/// Gradients of `matmul(a, b)` given the output gradient.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let p = matmul_plan(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, n) = (p.m, p.k, p.n);
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    let mut da = need_a.then(|| vec![T::zero(); a.numel()]);
    let mut db = need_b.then(|| vec![T::zero(); b.numel()]);
    if p.fold_rows {
        let rows = ad.len() / k.max(1);
        if let Some(da) = da.as_mut() {
            // dA = G · Bᵀ
            T::gemm(rows, n, k, T::one(), gd, n as isize, 1, bd, 1, n as isize, T::zero(), da, k as isize, 1);
        }
        if let Some(db) = db.as_mut() {
            // dB = Aᵀ · G
            T::gemm(k, rows, n, T::one(), ad, 1, k as isize, gd, n as isize, 1, T::zero(), db, n as isize, 1);
        }
    } else {
        for (bi, (&oa, &ob)) in p.a_offsets.iter().zip(&p.b_offsets).enumerate() {
            let g = &gd[bi * m * n..];
            if let Some(da) = da.as_mut() {
                T::gemm(m, n, k, T::one(), g, n as isize, 1, &bd[ob..], 1, n as isize, T::one(), &mut da[oa..], k as isize, 1);
            }
            if let Some(db) = db.as_mut() {
                T::gemm(k, m, n, T::one(), &ad[oa..], 1, k as isize, g, n as isize, 1, T::one(), &mut db[ob..], n as isize, 1);
            }
        }
    }
    (
        da.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        db.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    )
}

pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>, TensorError> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(TensorError::Shape {
            op: "permute",
            detail: format!("axes {axes:?} are not a permutation of rank {rank}"),
        });
    }
    let in_st = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_st: Vec<usize> = axes.iter().map(|&a| in_st[a]).collect();
    let n = x.numel();
    let xd = x.data();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        return Ok(x.clone());
    }
    // Iterate the output in order; innermost axis handled as a strided run.
    let inner = out_shape[rank - 1];
    let inner_st = src_st[rank - 1];
    let outer_shape = &out_shape[..rank - 1];
    let mut counter = vec![0usize; rank - 1];
    let mut off = 0usize;
    for _ in 0..numel(outer_shape) {
        for j in 0..inner {
            out.push(xd[off + j * inner_st]);
        }
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            off += src_st[ax];
            if counter[ax] < outer_shape[ax] {
                break;
            }
            off -= src_st[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
    if axis >= x.rank() {
        return Err(TensorError::Shape {
            op: "softmax",
            detail: format!("axis {axis} out of range for {:?}", x.shape()),
        });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    if inner == 1 {
        for (row, orow) in xd.chunks(len).zip(out.chunks_mut(len)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                s += *o;
            }
            let inv = T::one() / s;
            orow.iter_mut().for_each(|o| *o *= inv);
        }
    } else {
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                let mx = (0..len).map(|i| xd[base + i * inner]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for i in 0..len {
                    let e = (xd[base + i * inner] - mx).exp();
                    out[base + i * inner] = e;
                    s += e;
                }
                for i in 0..len {
                    out[base + i * inner] = out[base + i * inner] / s;
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), grad.data());
    let mut dx = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for j in 0..inner {
            let base = o * len * inner + j;
            let dot: T = (0..len).map(|i| yd[base + i * inner] * gd[base + i * inner]).sum();
            for i in 0..len {
                let p = base + i * inner;
                dx[p] = yd[p] * (gd[p] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Normalizes each last-axis row; returns `(xhat, rstd)`.
pub fn layernorm_normalize<T: Scalar>(x: &Tensor<T>, eps: T) -> (Vec<T>, Vec<T>) {
    let d = *x.shape().last().unwrap_or(&1);
    let rows = x.numel() / d.max(1);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / lit(d as f64);
    for (r, (row, orow)) in x.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c: T = lit(GELU_C);
    let a: T = lit(GELU_A);
    let half: T = lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c: T = lit(GELU_C);
    let a: T = lit(GELU_A);
    let half: T = lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x)
}

/// Output extent of a convolution axis, if positive.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Unfolds one `[C,H,W]` image into `[C*kh*kw, oh*ow]` columns.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let l = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let l = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_geom(
    x: &[usize],
    w: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom, TensorError> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
        return Err(TensorError::Shape {
            op: "conv2d",
            detail: format!("input {x:?} and weight {w:?} (expected [B,C,H,W] and [O,C,kh,kw])"),
        });
    }
    let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(wd, kw, stride, pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(ConvGeom {
            c: x[1],
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        }),
        _ => Err(TensorError::config(
            "conv2d",
            format!("non-positive output extent for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, padding {pad}"),
        )),
    }
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let g = conv_geom(x.shape(), w.shape(), stride, pad)?;
    let (batch, o) = (x.shape()[0], w.shape()[0]);
    if let Some(b) = b {
        if b.shape() != [o] {
            return Err(TensorError::shape("conv2d", b.shape(), &[o]));
        }
    }
    let (ckk, l) = (g.c * g.kh * g.kw, g.oh * g.ow);
    let mut cols = vec![T::zero(); ckk * l];
    let mut out = vec![T::zero(); batch * o * l];
    let img = g.c * g.h * g.w;
    for bi in 0..batch {
        im2col(&x.data()[bi * img..(bi + 1) * img], &g, &mut cols);
        let dst = &mut out[bi * o * l..(bi + 1) * o * l];
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(l).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[oc]);
            }
        }
        T::gemm(o, ckk, l, T::one(), w.data(), ckk as isize, 1, &cols, l as isize, 1, T::one(), dst, l as isize, 1);
    }
    Ok(Tensor::from_parts(vec![batch, o, g.oh, g.ow], out))
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let g = conv_geom(x.shape(), w.shape(), stride, pad).expect("validated in forward");
    let (batch, o) = (x.shape()[0], w.shape()[0]);
    let (ckk, l) = (g.c * g.kh * g.kw, g.oh * g.ow);
    let img = g.c * g.h * g.w;
    let mut cols = vec![T::zero(); ckk * l];
    let mut dcols = vec![T::zero(); ckk * l];
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); o];
    for bi in 0..batch {
        let gb = &grad.data()[bi * o * l..(bi + 1) * o * l];
        for (oc, chunk) in gb.chunks(l).enumerate() {
            db[oc] += chunk.iter().copied().sum::<T>();
        }
        im2col(&x.data()[bi * img..(bi + 1) * img], &g, &mut cols);
        // dW += G · colsᵀ
        T::gemm(o, l, ckk, T::one(), gb, l as isize, 1, &cols, 1, l as isize, T::one(), &mut dw, ckk as isize, 1);
        // dcols = Wᵀ · G
        T::gemm(ckk, o, l, T::one(), w.data(), 1, ckk as isize, gb, l as isize, 1, T::zero(), &mut dcols, l as isize, 1);
        col2im(&dcols, &g, &mut dx[bi * img..(bi + 1) * img]);
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![o], db),
    )
}

/// Source index of destination `dst` when resizing `src_ext` → `dst_ext`.
#[inline]
pub fn nearest_source(dst: usize, src_ext: usize, dst_ext: usize) -> usize {
    dst * src_ext / dst_ext
}

fn check_nchw(op: &'static str, shape: &[usize]) -> Result<(), TensorError> {
    if shape.len() != 4 {
        return Err(TensorError::Shape {
            op,
            detail: format!("expected [B,C,H,W], got {shape:?}"),
        });
    }
    Ok(())
}

pub fn interpolate_nearest<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>, TensorError> {
    check_nchw("interpolate_nearest", x.shape())?;
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::config("interpolate_nearest", "output extent must be >= 1"));
    }
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let cols: Vec<usize> = (0..out_w).map(|j| nearest_source(j, w, out_w)).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in 0..b * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for i in 0..out_h {
            let row = &src[nearest_source(i, h, out_h) * w..];
            out.extend(cols.iter().map(|&j| row[j]));
        }
    }
    Ok(Tensor::from_parts(vec![b, c, out_h, out_w], out))
}

pub fn interpolate_nearest_backward<T: Scalar>(in_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = [in_shape[0], in_shape[1], in_shape[2], in_shape[3]];
    let (oh, ow) = (grad.shape()[2], grad.shape()[3]);
    let mut dx = vec![T::zero(); b * c * h * w];
    let gd = grad.data();
    for plane in 0..b * c {
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            let si = nearest_source(i, h, oh);
            for j in 0..ow {
                dst[si * w + nearest_source(j, w, ow)] += src[i * ow + j];
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

pub const SCALE_FACTORS: [usize; 3] = [2, 3, 4];

pub fn check_scale_factor(op: &'static str, s: usize) -> Result<(), TensorError> {
    if SCALE_FACTORS.contains(&s) {
        Ok(())
    } else {
        Err(TensorError::config(op, format!("scale factor {s} not in {{2, 3, 4}}")))
    }
}

/// Block-average downsampling by `s`; trailing rows/cols that do not fill a
/// block are dropped.
pub fn downsample_area<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>, TensorError> {
    check_nchw("downsample_area", x.shape())?;
    check_scale_factor("downsample_area", s)?;
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (oh, ow) = (h / s, w / s);
    if oh == 0 || ow == 0 {
        return Err(TensorError::config(
            "downsample_area",
            format!("{h}x{w} image is smaller than factor {s}"),
        ));
    }
    let inv: T = lit(1.0 / (s * s) as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); b * c * oh * ow];
    for plane in 0..b * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                // Mean as pivot + mean deviation: exact on constant blocks.
                let pivot = src[i * s * w + j * s];
                let mut acc = T::zero();
                for di in 0..s {
                    let row = &src[(i * s + di) * w + j * s..];
                    for &v in &row[..s] {
                        acc += v - pivot;
                    }
                }
                dst[i * ow + j] = pivot + acc * inv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, oh, ow], out))
}

pub fn downsample_area_backward<T: Scalar>(in_shape: &[usize], grad: &Tensor<T>, s: usize) -> Tensor<T> {
    let [b, c, h, w] = [in_shape[0], in_shape[1], in_shape[2], in_shape[3]];
    let (oh, ow) = (h / s, w / s);
    let inv: T = lit(1.0 / (s * s) as f64);
    let gd = grad.data();
    let mut dx = vec![T::zero(); b * c * h * w];
    for plane in 0..b * c {
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh * s {
            for j in 0..ow * s {
                dst[i * w + j] = src[(i / s) * ow + j / s] * inv;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

pub fn index_select<T: Scalar>(x: &Tensor<T>, axis: usize, idx: &[usize]) -> Result<Tensor<T>, TensorError> {
    if axis >= x.rank() {
        return Err(TensorError::Shape {
            op: "index_select",
            detail: format!("axis {axis} out of range for {:?}", x.shape()),
        });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
        return Err(TensorError::Shape {
            op: "index_select",
            detail: format!("index {bad} out of range for extent {len}"),
        });
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(outer * idx.len() * inner);
    for o in 0..outer {
        for &i in idx {
            let start = (o * len + i) * inner;
            out.extend_from_slice(&xd[start..start + inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = idx.len();
    Ok(Tensor::from_parts(shape, out))
}

/// Scatter-add inverse of [`index_select`].
pub fn index_add<T: Scalar>(in_shape: &[usize], axis: usize, idx: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let (outer, len, inner) = axis_split(in_shape, axis);
    let mut dx = vec![T::zero(); numel(in_shape)];
    let gd = grad.data();
    for o in 0..outer {
        for (k, &i) in idx.iter().enumerate() {
            let dst = (o * len + i) * inner;
            let src = (o * idx.len() + k) * inner;
            for t in 0..inner {
                dx[dst + t] += gd[src + t];
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Per-sample row gather on `[B,N,D]`: `idx` holds `B` runs of `M` indices.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, idx: &[usize], m: usize) -> Result<Tensor<T>, TensorError> {
    if x.rank() != 3 || idx.len() != x.shape()[0] * m {
        return Err(TensorError::Shape {
            op: "gather_rows",
            detail: format!("input {:?} with {} indices of run {m}", x.shape(), idx.len()),
        });
    }
    let [b, n, d] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(TensorError::Shape {
            op: "gather_rows",
            detail: format!("row {bad} out of range for {n} rows"),
        });
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(b * m * d);
    for bi in 0..b {
        for &i in &idx[bi * m..(bi + 1) * m] {
            let s = (bi * n + i) * d;
            out.extend_from_slice(&xd[s..s + d]);
        }
    }
    Ok(Tensor::from_parts(vec![b, m, d], out))
}

pub fn scatter_rows<T: Scalar>(in_shape: &[usize], idx: &[usize], m: usize, grad: &Tensor<T>) -> Tensor<T> {
    let [b, n, d] = [in_shape[0], in_shape[1], in_shape[2]];
    let mut dx = vec![T::zero(); b * n * d];
    let gd = grad.data();
    for bi in 0..b {
        for (k, &i) in idx[bi * m..(bi + 1) * m].iter().enumerate() {
            let dst = (bi * n + i) * d;
            let src = (bi * m + k) * d;
            for t in 0..d {
                dx[dst + t] += gd[src + t];
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>, TensorError> {
    let first = xs.first().ok_or_else(|| TensorError::Shape {
        op: "concat",
        detail: "no inputs".into(),
    })?;
    if axis >= first.rank() {
        return Err(TensorError::Shape {
            op: "concat",
            detail: format!("axis {axis} out of range for {:?}", first.shape()),
        });
    }
    for x in xs {
        let ok = x.rank() == first.rank()
            && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(TensorError::shape("concat", first.shape(), x.shape()));
        }
    }
    let outer = numel(&first.shape()[..axis]);
    let mut shape = first.shape().to_vec();
    shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for x in xs {
            let run = x.numel() / outer.max(1);
            out.extend_from_slice(&x.data()[o * run..(o + 1) * run]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>, TensorError> {
    if axis >= x.rank() || start + len > x.shape()[axis] {
        return Err(TensorError::Shape {
            op: "narrow",
            detail: format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape()),
        });
    }
    let idx: Vec<usize> = (start..start + len).collect();
    index_select(x, axis, &idx)
}

pub fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
    if axis >= x.rank() {
        return Err(TensorError::Shape {
            op: "sum_axis",
            detail: format!("axis {axis} out of range for {:?}", x.shape()),
        });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..len {
            let src = &xd[(o * len + i) * inner..(o * len + i + 1) * inner];
            for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

/// Broadcasts a tensor with `axis` removed back along `axis` of `shape`.
pub fn expand_axis<T: Scalar>(g: &Tensor<T>, shape: &[usize], axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let gd = g.data();
    let mut out = Vec::with_capacity(numel(shape));
    for o in 0..outer {
        for _ in 0..len {
            out.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}
