//! Row-wise kernels of the reference transformer and their backward passes.
//!
//! Every position-wise kernel loops over rows independently with a fixed inner
//! accumulation order, so a row's result never depends on which other rows are
//! in the batch.

use crate::matrix::{DenseMatrix, ShapeError};
use crate::scalar::Scalar;

use super::ModelError;

/// `x W^T` for `x: [M x in]`, `w: [out x in]`.
pub fn linear<T: Scalar>(x: &DenseMatrix<T>, w: &DenseMatrix<T>) -> Result<DenseMatrix<T>, ShapeError> {
    if x.cols() != w.cols() {
        return Err(ShapeError::Mismatch {
            expected: format!("{} input columns", w.cols()),
            got: format!("{}", x.cols()),
        });
    }
    let mut out = DenseMatrix::zeros(x.rows(), w.rows());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dst = out.row_mut(r);
        for (o, slot) in dst.iter_mut().enumerate() {
            *slot = dot(xr, w.row(o));
        }
    }
    Ok(out)
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Backward of [`linear`]: returns `dx`, accumulates `dw`.
pub fn linear_backward<T: Scalar>(
    dy: &DenseMatrix<T>,
    x: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    dw: &mut DenseMatrix<T>,
) -> DenseMatrix<T> {
    let mut dx = DenseMatrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let xr = x.row(r);
        for o in 0..w.rows() {
            let g = dy.get(r, o);
            let wo = w.row(o);
            let dxr = dx.row_mut(r);
            for (d, &wv) in dxr.iter_mut().zip(wo) {
                *d += g * wv;
            }
            for (d, &xv) in dw.row_mut(o).iter_mut().zip(xr) {
                *d += g * xv;
            }
        }
    }
    dx
}

/// RMS normalization of each row: `x * w / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm<T: Scalar>(x: &DenseMatrix<T>, weight: &[T], eps: f64) -> Result<DenseMatrix<T>, ModelError> {
    Ok(rmsnorm_with_scale(x, weight, eps)?.0)
}

/// Also returns the per-row inverse RMS, needed by the backward pass.
pub(crate) fn rmsnorm_with_scale<T: Scalar>(
    x: &DenseMatrix<T>,
    weight: &[T],
    eps: f64,
) -> Result<(DenseMatrix<T>, Vec<T>), ModelError> {
    let d = x.cols();
    if weight.len() != d {
        return Err(ModelError::Shape(ShapeError::Mismatch {
            expected: format!("norm weight of length {d}"),
            got: format!("{}", weight.len()),
        }));
    }
    let eps = T::of(eps);
    let n = T::from_usize(d).expect("dimension fits");
    let mut out = DenseMatrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let ms = xr.iter().fold(T::zero(), |a, &v| a + v * v) / n;
        let s = (ms + eps).sqrt().recip();
        for ((o, &v), &w) in out.row_mut(r).iter_mut().zip(xr).zip(weight) {
            *o = v * s * w;
        }
        inv.push(s);
    }
    Ok((out, inv))
}

pub(crate) fn rmsnorm_backward<T: Scalar>(
    dy: &DenseMatrix<T>,
    x: &DenseMatrix<T>,
    weight: &[T],
    inv: &[T],
    dweight: &mut [T],
) -> DenseMatrix<T> {
    let d = x.cols();
    let n = T::from_usize(d).expect("dimension fits");
    let mut dx = DenseMatrix::zeros(x.rows(), d);
    for (r, &s) in inv.iter().enumerate().take(x.rows()) {
        let (xr, dyr) = (x.row(r), dy.row(r));
        let mut proj = T::zero();
        for c in 0..d {
            dweight[c] += dyr[c] * xr[c] * s;
            proj += dyr[c] * weight[c] * xr[c];
        }
        let k = s * s * s * proj / n;
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = s * dyr[c] * weight[c] - xr[c] * k;
        }
    }
    dx
}

/// Views `[M x heads*head_dim]` as `[M*heads x head_dim]` (no copy of semantics, row-major).
pub(crate) fn split_heads<T: Scalar>(x: DenseMatrix<T>, head_dim: usize) -> DenseMatrix<T> {
    let rows = x.rows() * x.cols() / head_dim;
    DenseMatrix::from_vec(rows, head_dim, x.into_vec()).expect("cols divisible by head_dim")
}

pub(crate) fn merge_heads<T: Scalar>(x: DenseMatrix<T>, width: usize) -> DenseMatrix<T> {
    let rows = x.rows() * x.cols() / width;
    DenseMatrix::from_vec(rows, width, x.into_vec()).expect("width divides total")
}

/// cos/sin rows for each position, `head_dim / 2` frequencies each.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(positions: &[u32], head_dim: usize, theta: f64) -> Result<Self, ModelError> {
        if !head_dim.is_multiple_of(2) {
            return Err(ModelError::OddHeadDim(head_dim));
        }
        let half = head_dim / 2;
        let inv_freq: Vec<f64> = (0..half).map(|i| theta.powf(-((2 * i) as f64) / head_dim as f64)).collect();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for &f in &inv_freq {
                let angle = p as f64 * f;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        Ok(Self { half, cos, sin })
    }

    fn row(&self, r: usize) -> (&[T], &[T]) {
        let span = r * self.half..(r + 1) * self.half;
        (&self.cos[span.clone()], &self.sin[span])
    }

    pub fn rows(&self) -> usize {
        self.cos.len() / self.half.max(1)
    }
}

/// Rotates every head of every row; `sign = -1` applies the inverse rotation.
fn rotate<T: Scalar>(x: &DenseMatrix<T>, table: &RopeTable<T>, head_dim: usize, inverse: bool) -> DenseMatrix<T> {
    let half = head_dim / 2;
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let (cos, sin) = table.row(r);
        let src = x.row(r);
        let dst = out.row_mut(r);
        for h in 0..x.cols() / head_dim {
            let base = h * head_dim;
            for i in 0..half {
                let (a, b) = (src[base + i], src[base + i + half]);
                let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                dst[base + i] = a * c - b * s;
                dst[base + i + half] = b * c + a * s;
            }
        }
    }
    out
}

/// Rotary embedding of `q` and `k` with the table's positions (rotate-half layout).
pub fn apply_rope<T: Scalar>(
    q: &DenseMatrix<T>,
    k: &DenseMatrix<T>,
    positions: &[u32],
    head_dim: usize,
    theta: f64,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>), ModelError> {
    let table = RopeTable::new(positions, head_dim, theta)?;
    apply_rope_table(q, k, &table, head_dim)
}

pub(crate) fn apply_rope_table<T: Scalar>(
    q: &DenseMatrix<T>,
    k: &DenseMatrix<T>,
    table: &RopeTable<T>,
    head_dim: usize,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>), ModelError> {
    for m in [q, k] {
        if m.rows() != table.rows() || m.cols() % head_dim != 0 {
            return Err(ModelError::Shape(ShapeError::Mismatch {
                expected: format!("{} rows of whole heads", table.rows()),
                got: format!("{}x{}", m.rows(), m.cols()),
            }));
        }
    }
    Ok((rotate(q, table, head_dim, false), rotate(k, table, head_dim, false)))
}

/// Backward of a rotation is the inverse rotation.
pub(crate) fn rope_backward<T: Scalar>(dy: &DenseMatrix<T>, table: &RopeTable<T>, head_dim: usize) -> DenseMatrix<T> {
    rotate(dy, table, head_dim, true)
}

#[inline]
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// SwiGLU weights: `gate`, `up` are `[d_int x d]`, `down` is `[d x d_int]`.
#[derive(Debug, Clone, Copy)]
pub struct MlpWeights<'a, T> {
    pub gate: &'a DenseMatrix<T>,
    pub up: &'a DenseMatrix<T>,
    pub down: &'a DenseMatrix<T>,
}

pub(crate) struct MlpCache<T> {
    gate: DenseMatrix<T>,
    up: DenseMatrix<T>,
    act: DenseMatrix<T>,
}

/// `W_down (SiLU(W_gate h) * (W_up h))` per row.
pub fn swiglu_mlp<T: Scalar>(h: &DenseMatrix<T>, w: MlpWeights<'_, T>) -> Result<DenseMatrix<T>, ModelError> {
    Ok(swiglu_with_cache(h, w)?.0)
}

pub(crate) fn swiglu_with_cache<T: Scalar>(
    h: &DenseMatrix<T>,
    w: MlpWeights<'_, T>,
) -> Result<(DenseMatrix<T>, MlpCache<T>), ModelError> {
    let gate = linear(h, w.gate)?;
    let up = linear(h, w.up)?;
    let mut act = DenseMatrix::zeros(gate.rows(), gate.cols());
    for ((a, &g), &u) in act.as_mut_slice().iter_mut().zip(gate.as_slice()).zip(up.as_slice()) {
        *a = silu(g) * u;
    }
    let out = linear(&act, w.down)?;
    Ok((out, MlpCache { gate, up, act }))
}

pub(crate) struct MlpGrads<'a, T> {
    pub gate: &'a mut DenseMatrix<T>,
    pub up: &'a mut DenseMatrix<T>,
    pub down: &'a mut DenseMatrix<T>,
}

pub(crate) fn swiglu_backward<T: Scalar>(
    dy: &DenseMatrix<T>,
    h: &DenseMatrix<T>,
    w: MlpWeights<'_, T>,
    cache: &MlpCache<T>,
    grads: MlpGrads<'_, T>,
) -> DenseMatrix<T> {
    let dact = linear_backward(dy, &cache.act, w.down, grads.down);
    let mut dgate = DenseMatrix::zeros(dact.rows(), dact.cols());
    let mut dup = DenseMatrix::zeros(dact.rows(), dact.cols());
    for i in 0..dact.as_slice().len() {
        let (da, g, u) = (dact.as_slice()[i], cache.gate.as_slice()[i], cache.up.as_slice()[i]);
        dup.as_mut_slice()[i] = da * silu(g);
        dgate.as_mut_slice()[i] = da * u * silu_grad(g);
    }
    let mut dh = linear_backward(&dgate, h, w.gate, grads.gate);
    let dh_up = linear_backward(&dup, h, w.up, grads.up);
    dh.add_assign(&dh_up).expect("same shape");
    dh
}

/// Head layout for grouped-query attention; query head `h` reads kv head
/// `h / (num_heads / num_kv_heads)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    fn kv_head(&self, h: usize) -> usize {
        h / (self.num_heads / self.num_kv_heads)
    }
}

/// Softmax probabilities saved for backward, one `L x L` block per (sequence, head).
pub(crate) struct AttentionCache<T> {
    probs: Vec<Vec<T>>,
}

/// Exact causal softmax attention within each sequence of a ragged batch.
pub fn attention_ragged<T: Scalar>(
    q: &DenseMatrix<T>,
    k: &DenseMatrix<T>,
    v: &DenseMatrix<T>,
    cu_seqlens: &[usize],
    heads: HeadLayout,
) -> Result<DenseMatrix<T>, ModelError> {
    Ok(attention_impl(q, k, v, cu_seqlens, heads, false)?.0)
}

pub(crate) fn attention_impl<T: Scalar>(
    q: &DenseMatrix<T>,
    k: &DenseMatrix<T>,
    v: &DenseMatrix<T>,
    cu_seqlens: &[usize],
    heads: HeadLayout,
    keep: bool,
) -> Result<(DenseMatrix<T>, Option<AttentionCache<T>>), ModelError> {
    let HeadLayout { num_heads, num_kv_heads, head_dim } = heads;
    let n = cu_seqlens.last().copied().unwrap_or(0);
    if num_kv_heads == 0 || num_heads % num_kv_heads != 0 {
        return Err(ModelError::InvalidConfig(format!("{num_heads} heads not divisible into {num_kv_heads} kv heads")));
    }
    q.expect_shape(n, num_heads * head_dim)?;
    k.expect_shape(n, num_kv_heads * head_dim)?;
    v.expect_shape(n, num_kv_heads * head_dim)?;

    let scale = T::of(1.0 / (head_dim as f64).sqrt());
    let mut out = DenseMatrix::zeros(n, num_heads * head_dim);
    let mut probs = Vec::new();
    let mut scores: Vec<T> = Vec::new();
    for w in cu_seqlens.windows(2) {
        let (start, len) = (w[0], w[1] - w[0]);
        for h in 0..num_heads {
            let (qo, ko) = (h * head_dim, heads.kv_head(h) * head_dim);
            let mut block = if keep { vec![T::zero(); len * len] } else { Vec::new() };
            for i in 0..len {
                let qi = &q.row(start + i)[qo..qo + head_dim];
                scores.clear();
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    let s = dot(qi, &k.row(start + j)[ko..ko + head_dim]) * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut sum = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let dst = &mut out.row_mut(start + i)[qo..qo + head_dim];
                for (j, s) in scores.iter().enumerate() {
                    let p = *s / sum;
                    for (o, &vv) in dst.iter_mut().zip(&v.row(start + j)[ko..ko + head_dim]) {
                        *o += p * vv;
                    }
                    if keep {
                        block[i * len + j] = p;
                    }
                }
            }
            if keep {
                probs.push(block);
            }
        }
    }
    Ok((out, keep.then_some(AttentionCache { probs })))
}

/// Returns `(dq, dk, dv)`.
pub(crate) fn attention_backward<T: Scalar>(
    dout: &DenseMatrix<T>,
    q: &DenseMatrix<T>,
    k: &DenseMatrix<T>,
    v: &DenseMatrix<T>,
    cu_seqlens: &[usize],
    heads: HeadLayout,
    cache: &AttentionCache<T>,
) -> (DenseMatrix<T>, DenseMatrix<T>, DenseMatrix<T>) {
    let HeadLayout { num_heads, head_dim, .. } = heads;
    let scale = T::of(1.0 / (head_dim as f64).sqrt());
    let mut dq = DenseMatrix::zeros(q.rows(), q.cols());
    let mut dk = DenseMatrix::zeros(k.rows(), k.cols());
    let mut dv = DenseMatrix::zeros(v.rows(), v.cols());
    let mut blocks = cache.probs.iter();
    let mut dp: Vec<T> = Vec::new();
    for w in cu_seqlens.windows(2) {
        let (start, len) = (w[0], w[1] - w[0]);
        for h in 0..num_heads {
            let block = blocks.next().expect("one block per sequence and head");
            let (qo, ko) = (h * head_dim, heads.kv_head(h) * head_dim);
            for i in 0..len {
                let doi: Vec<T> = dout.row(start + i)[qo..qo + head_dim].to_vec();
                dp.clear();
                let mut weighted = T::zero();
                for j in 0..=i {
                    let p = block[i * len + j];
                    let g = dot(&doi, &v.row(start + j)[ko..ko + head_dim]);
                    weighted += p * g;
                    dp.push(g);
                    for (d, &o) in dv.row_mut(start + j)[ko..ko + head_dim].iter_mut().zip(&doi) {
                        *d += p * o;
                    }
                }
                let qi: Vec<T> = q.row(start + i)[qo..qo + head_dim].to_vec();
                for j in 0..=i {
                    let ds = block[i * len + j] * (dp[j] - weighted) * scale;
                    let kj = &k.row(start + j)[ko..ko + head_dim];
                    for (d, &kv) in dq.row_mut(start + i)[qo..qo + head_dim].iter_mut().zip(kj) {
                        *d += ds * kv;
                    }
                    for (d, &qv) in dk.row_mut(start + j)[ko..ko + head_dim].iter_mut().zip(&qi) {
                        *d += ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
