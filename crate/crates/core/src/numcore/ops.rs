//! Forward and backward kernels for the attention-model primitives. The tape
//! records calls to these; the free functions at the bottom evaluate them
//! eagerly.

use super::tensor::{matmul_into, s, Scalar, Tensor2};
use crate::error::{Error, Result};

/// Finite stand-in for `-inf` inside softmax.
pub const MASK_SENTINEL: f64 = -1e9;
/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// Mask entries at or below this value count as masked.
const MASKED_BELOW: f64 = -1e8;

#[inline]
pub fn is_masked<T: Scalar>(m: T) -> bool {
    m.to_f64() <= MASKED_BELOW
}

/// Softmax of `logits + mask` written into `out`. Masked positions are
/// exactly zero.
pub fn softmax_row<T: Scalar>(logits: &[T], mask: Option<&[T]>, out: &mut [T]) -> Result<()> {
    let masked = |j: usize| mask.is_some_and(|m| is_masked(m[j]));
    let add = |j: usize| mask.map_or(T::zero(), |m| if is_masked(m[j]) { T::zero() } else { m[j] });
    let mut max = T::neg_infinity();
    for j in 0..logits.len() {
        if !masked(j) {
            max = max.max(logits[j] + add(j));
        }
    }
    if max == T::neg_infinity() {
        return Err(Error::MaskExhausted);
    }
    let mut total = T::zero();
    for j in 0..logits.len() {
        out[j] = if masked(j) { T::zero() } else { (logits[j] + add(j) - max).exp() };
        total += out[j];
    }
    let inv = T::one() / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(())
}

/// Backward of a softmax row given its output `p`: `p * (g - <p, g>)`.
pub fn softmax_row_backward<T: Scalar>(p: &[T], grad_out: &[T], grad_in: &mut [T]) {
    let dot: T = p.iter().zip(grad_out).map(|(&a, &b)| a * b).sum();
    for j in 0..p.len() {
        grad_in[j] += p[j] * (grad_out[j] - dot);
    }
}

pub struct AttentionShape {
    pub heads: usize,
    pub groups: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    /// Queries per group.
    pub queries: usize,
    /// Keys per group.
    pub keys: usize,
}

/// Validates a grouped attention call: the rows of `q` and of `k`/`v` split
/// into `groups` equal consecutive blocks, and block `g` of the queries only
/// sees block `g` of the keys. `mask` is `q.rows() x keys-per-group`.
pub fn attention_shape<T: Scalar>(
    q: &Tensor2<T>,
    k: &Tensor2<T>,
    v: &Tensor2<T>,
    heads: usize,
    groups: usize,
    mask: Option<&Tensor2<T>>,
) -> Result<AttentionShape> {
    if heads == 0 || !q.cols().is_multiple_of(heads) || !v.cols().is_multiple_of(heads) {
        return Err(Error::Shape(format!(
            "{heads} heads do not divide query width {} / value width {}",
            q.cols(),
            v.cols()
        )));
    }
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention q {:?}, k {:?}, v {:?} disagree",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if groups == 0 || !q.rows().is_multiple_of(groups) || !k.rows().is_multiple_of(groups) {
        return Err(Error::Shape(format!(
            "{groups} groups do not divide {} queries / {} keys",
            q.rows(),
            k.rows()
        )));
    }
    let keys = k.rows() / groups;
    if let Some(m) = mask {
        if m.shape() != (q.rows(), keys) {
            return Err(Error::Shape(format!(
                "mask {:?} does not match scores {}x{keys}",
                m.shape(),
                q.rows()
            )));
        }
    }
    Ok(AttentionShape {
        heads,
        groups,
        key_dim: q.cols() / heads,
        value_dim: v.cols() / heads,
        queries: q.rows() / groups,
        keys,
    })
}

/// Multi-head scaled dot-product attention without projections. Returns the
/// concatenated head outputs and the weights laid out `[head][query][key]`,
/// with keys indexed within the query's group.
pub fn attention_forward<T: Scalar>(
    q: &Tensor2<T>,
    k: &Tensor2<T>,
    v: &Tensor2<T>,
    heads: usize,
    groups: usize,
    mask: Option<&Tensor2<T>>,
) -> Result<(Tensor2<T>, Vec<T>)> {
    let shape = attention_shape(q, k, v, heads, groups, mask)?;
    let (m, n) = (q.rows(), shape.keys);
    let (dk, dv) = (shape.key_dim, shape.value_dim);
    let scale: T = s::<T>(1.0) / s::<T>(dk as f64).sqrt();
    let mut weights = vec![T::zero(); heads * m * n];
    let mut out = Tensor2::zeros(m, v.cols());
    let mut scores = vec![T::zero(); n];
    for h in 0..heads {
        for i in 0..m {
            let base = (i / shape.queries) * n;
            let qi = &q.row(i)[h * dk..(h + 1) * dk];
            for (j, sc) in scores.iter_mut().enumerate() {
                let kj = &k.row(base + j)[h * dk..(h + 1) * dk];
                *sc = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
            }
            let w = &mut weights[(h * m + i) * n..(h * m + i + 1) * n];
            softmax_row(&scores, mask.map(|mk| mk.row(i)), w)?;
            let o = &mut out.row_mut(i)[h * dv..(h + 1) * dv];
            for (j, &wij) in w.iter().enumerate() {
                if wij == T::zero() {
                    continue;
                }
                for (oc, &vc) in o.iter_mut().zip(&v.row(base + j)[h * dv..(h + 1) * dv]) {
                    *oc += wij * vc;
                }
            }
        }
    }
    Ok((out, weights))
}

/// Gradients of [`attention_forward`] with respect to `q`, `k` and `v`.
pub fn attention_backward<T: Scalar>(
    q: &Tensor2<T>,
    k: &Tensor2<T>,
    v: &Tensor2<T>,
    heads: usize,
    groups: usize,
    weights: &[T],
    grad_out: &Tensor2<T>,
) -> (Tensor2<T>, Tensor2<T>, Tensor2<T>) {
    let m = q.rows();
    let (per_group, n) = (m / groups, k.rows() / groups);
    let dk = q.cols() / heads;
    let dv = v.cols() / heads;
    let scale: T = s::<T>(1.0) / s::<T>(dk as f64).sqrt();
    let mut gq = Tensor2::zeros(m, q.cols());
    let mut gk = Tensor2::zeros(k.rows(), k.cols());
    let mut gv = Tensor2::zeros(v.rows(), v.cols());
    let mut dw = vec![T::zero(); n];
    let mut ds = vec![T::zero(); n];
    for h in 0..heads {
        for i in 0..m {
            let base = (i / per_group) * n;
            let w = &weights[(h * m + i) * n..(h * m + i + 1) * n];
            let go = &grad_out.row(i)[h * dv..(h + 1) * dv];
            for j in 0..n {
                if w[j] == T::zero() {
                    dw[j] = T::zero();
                    continue;
                }
                let vj = &v.row(base + j)[h * dv..(h + 1) * dv];
                dw[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                for (g, &o) in gv.row_mut(base + j)[h * dv..(h + 1) * dv].iter_mut().zip(go) {
                    *g += w[j] * o;
                }
            }
            ds.iter_mut().for_each(|x| *x = T::zero());
            softmax_row_backward(w, &dw, &mut ds);
            for j in 0..n {
                let d = ds[j] * scale;
                if d == T::zero() {
                    continue;
                }
                let (kj, qi) = (&k.row(base + j)[h * dk..(h + 1) * dk], &q.row(i)[h * dk..(h + 1) * dk]);
                for (g, &kc) in gq.row_mut(i)[h * dk..(h + 1) * dk].iter_mut().zip(kj) {
                    *g += d * kc;
                }
                for (g, &qc) in gk.row_mut(base + j)[h * dk..(h + 1) * dk].iter_mut().zip(qi) {
                    *g += d * qc;
                }
            }
        }
    }
    (gq, gk, gv)
}

/// Row-wise layer normalization followed by the affine map. Also returns the
/// normalized rows and per-row inverse standard deviations for backward.
pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor2<T>,
    gain: &[T],
    shift: &[T],
) -> Result<(Tensor2<T>, Tensor2<T>, Vec<T>)> {
    let c = x.cols();
    if gain.len() != c || shift.len() != c {
        return Err(Error::Shape(format!(
            "layer norm over {c} features with gain {} / shift {}",
            gain.len(),
            shift.len()
        )));
    }
    let inv_c = s::<T>(1.0) / s::<T>(c as f64);
    let mut y = Tensor2::zeros(x.rows(), c);
    let mut xhat = Tensor2::zeros(x.rows(), c);
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let inv = T::one() / (var + s(LN_EPS)).sqrt();
        rstd.push(inv);
        let (hr, yr) = (xhat.row_mut(r), y.row_mut(r));
        for j in 0..c {
            hr[j] = (row[j] - mean) * inv;
        }
        for j in 0..c {
            yr[j] = hr[j] * gain[j] + shift[j];
        }
    }
    Ok((y, xhat, rstd))
}

/// Returns `(dx, dgain, dshift)`.
pub fn layer_norm_backward<T: Scalar>(
    xhat: &Tensor2<T>,
    rstd: &[T],
    gain: &[T],
    grad_out: &Tensor2<T>,
) -> (Tensor2<T>, Vec<T>, Vec<T>) {
    let c = xhat.cols();
    let cf = s::<T>(c as f64);
    let mut dx = Tensor2::zeros(xhat.rows(), c);
    let mut dgain = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for r in 0..xhat.rows() {
        let (h, g) = (xhat.row(r), grad_out.row(r));
        for j in 0..c {
            dgain[j] += g[j] * h[j];
            dshift[j] += g[j];
            dxhat[j] = g[j] * gain[j];
        }
        let sum_d: T = dxhat.iter().copied().sum();
        let sum_dh: T = dxhat.iter().zip(h).map(|(&a, &b)| a * b).sum();
        let k = rstd[r] / cf;
        for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = k * (cf * dxhat[j] - sum_d - h[j] * sum_dh);
        }
    }
    (dx, dgain, dshift)
}

// ---------------------------------------------------------------------------
// Eager API

/// `x W (+ b)` with `b` broadcast over rows.
pub fn linear<T: Scalar>(x: &Tensor2<T>, w: &Tensor2<T>, b: Option<&[T]>) -> Result<Tensor2<T>> {
    let mut out = matmul_into(x, false, w, false)?;
    if let Some(bias) = b {
        if bias.len() != out.cols() {
            return Err(Error::Shape(format!("bias of {} for {} outputs", bias.len(), out.cols())));
        }
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(bias) {
                *o += bb;
            }
        }
    }
    Ok(out)
}

/// Multi-head attention output (heads concatenated, before any output
/// projection).
pub fn mha<T: Scalar>(
    q: &Tensor2<T>,
    k: &Tensor2<T>,
    v: &Tensor2<T>,
    heads: usize,
    mask: Option<&Tensor2<T>>,
) -> Result<Tensor2<T>> {
    attention_forward(q, k, v, heads, 1, mask).map(|(o, _)| o)
}

/// Attention weights of every head, one `queries x keys` tensor per head.
pub fn attention_weights<T: Scalar>(
    q: &Tensor2<T>,
    k: &Tensor2<T>,
    v: &Tensor2<T>,
    heads: usize,
    mask: Option<&Tensor2<T>>,
) -> Result<Vec<Tensor2<T>>> {
    let (_, w) = attention_forward(q, k, v, heads, 1, mask)?;
    let (m, n) = (q.rows(), k.rows());
    Ok(w.chunks(m * n)
        .map(|c| Tensor2::from_vec(m, n, c.to_vec()).expect("chunk size matches"))
        .collect())
}

pub fn softmax_masked<T: Scalar>(logits: &[T], mask: &[T]) -> Result<Vec<T>> {
    if logits.len() != mask.len() {
        return Err(Error::Shape(format!("{} logits with {} mask entries", logits.len(), mask.len())));
    }
    let mut out = vec![T::zero(); logits.len()];
    softmax_row(logits, Some(mask), &mut out)?;
    Ok(out)
}

pub fn layer_norm<T: Scalar>(x: &Tensor2<T>, gain: &[T], shift: &[T]) -> Result<Tensor2<T>> {
    layer_norm_forward(x, gain, shift).map(|(y, _, _)| y)
}
