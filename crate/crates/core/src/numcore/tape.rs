//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward sweep. [`Tape::backward`] walks the nodes in
//! reverse and accumulates parameter gradients into a [`ParamStore`].

use std::collections::HashMap;
use std::sync::Arc;

use super::ops;
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_acc, gemm_slice, matmul_into, Scalar, Tensor2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse row-mixing matrix: output row `r` is `sum w * x[src]` over the
/// `(src, w)` entries registered for `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPool<T> {
    offsets: Vec<usize>,
    entries: Vec<(usize, T)>,
}

impl<T: Scalar> Default for RowPool<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> RowPool<T> {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    pub fn gather(idx: &[usize]) -> Self {
        Self {
            offsets: (0..=idx.len()).collect(),
            entries: idx.iter().map(|&i| (i, T::one())).collect(),
        }
    }

    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, T)>) {
        self.entries.extend(entries);
        self.offsets.push(self.entries.len());
    }

    /// Appends the uniform mean of `rows` (a zero row when empty).
    pub fn push_mean(&mut self, rows: &[usize]) {
        let w = T::one() / T::from_f64(rows.len().max(1) as f64);
        self.push_row(rows.iter().map(|&r| (r, w)));
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> &[(usize, T)] {
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, groups: usize, weights: Vec<T> },
    GroupScores { a: Var, b: Var, groups: usize, scale: T },
    Pool { x: Var, pool: RowPool<T> },
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Tensor2<T>, rstd: Vec<T> },
    Softmax(Var),
    Mix { p: Var, a: Var, b: Var },
    LogPick { x: Var, idx: Vec<usize> },
    WeightedSum { x: Var, w: Vec<T> },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
}

struct Node<T> {
    value: Arc<Tensor2<T>>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that keeps everything needed for [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            recording: true,
        }
    }

    /// A forward-only tape; backward caches are skipped.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after `mark` (a previous [`Tape::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.params.retain(|_, v| v.0 < mark);
    }

    pub fn value(&self, v: Var) -> &Tensor2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor2<T>, op: Op<T>) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced on tape");
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Tensor2<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The tape variable bound to a stored parameter (created once per tape).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_shared(store.shared(id), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_into(self.value(a), false, self.value(b), false)?;
        Ok(self.push(out, Op::MatMul { a, b, transpose_b: false }))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_into(self.value(a), false, self.value(b), true)?;
        Ok(self.push(out, Op::MatMul { a, b, transpose_b: true }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds the `1 x c` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape(format!("row bias {:?} for {:?}", bv.shape(), xv.shape())));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x))
    }

    /// Multi-head scaled dot-product attention (no projections). `mask` is
    /// additive, `queries x keys`, with sentinel entries for blocked pairs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Tensor2<T>>) -> Result<Var> {
        self.attention_grouped(q, k, v, heads, 1, mask)
    }

    /// Attention applied independently to `groups` equal row blocks of the
    /// queries and keys; `mask` is `queries x keys-per-group`.
    pub fn attention_grouped(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        mask: Option<&Tensor2<T>>,
    ) -> Result<Var> {
        let (out, weights) = ops::attention_forward(self.value(q), self.value(k), self.value(v), heads, groups, mask)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, groups, weights }))
    }

    /// Block-wise `scale * a_g b_g^T` for `groups` equal row blocks of `a`
    /// and `b`, stacked to `a.rows() x (b.rows() / groups)`.
    pub fn group_scores(&mut self, a: Var, b: Var, groups: usize, scale: T) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if groups == 0 || av.rows() % groups != 0 || bv.rows() % groups != 0 || av.cols() != bv.cols() {
            return Err(Error::Shape(format!("group scores {:?} x {:?} in {groups} groups", av.shape(), bv.shape())));
        }
        let (ma, mb, d) = (av.rows() / groups, bv.rows() / groups, av.cols());
        let mut out = Tensor2::zeros(av.rows(), mb);
        for g in 0..groups {
            gemm_slice(
                ma,
                d,
                mb,
                &av.data()[g * ma * d..(g + 1) * ma * d],
                false,
                &bv.data()[g * mb * d..(g + 1) * mb * d],
                true,
                scale,
                &mut out.data_mut()[g * ma * mb..(g + 1) * ma * mb],
            );
        }
        Ok(self.push(out, Op::GroupScores { a, b, groups, scale }))
    }

    /// Each output row is a weighted sum of rows of `x`, as listed by `pool`.
    pub fn pool_rows(&mut self, x: Var, pool: RowPool<T>) -> Result<Var> {
        let xv = self.value(x);
        if pool.entries.iter().any(|&(src, _)| src >= xv.rows()) {
            return Err(Error::Shape(format!("row pool reads past {} rows", xv.rows())));
        }
        let mut out = Tensor2::zeros(pool.rows(), xv.cols());
        for r in 0..pool.rows() {
            let o = out.row_mut(r);
            for &(src, w) in pool.row(r) {
                for (oc, &xc) in o.iter_mut().zip(xv.row(src)) {
                    *oc += w * xc;
                }
            }
        }
        Ok(self.push(out, Op::Pool { x, pool }))
    }

    /// Rows of `x` in the order given by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.pool_rows(x, RowPool::gather(idx))
    }

    /// Attention weights recorded by an attention node, `[head][query][key]`.
    pub fn attention_weights(&self, node: Var) -> Option<&[T]> {
        match &self.nodes[node.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (y, xhat, rstd) = ops::layer_norm_forward(self.value(x), self.value(gain).data(), self.value(shift).data())?;
        let (xhat, rstd) = if self.recording { (xhat, rstd) } else { (Tensor2::zeros(0, 0), Vec::new()) };
        Ok(self.push(y, Op::LayerNorm { x, gain, shift, xhat, rstd }))
    }

    /// Row-wise softmax of `x + mask`; masked entries come out exactly zero.
    pub fn softmax_masked(&mut self, x: Var, mask: &Tensor2<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.shape() != xv.shape() {
            return Err(Error::Shape(format!("mask {:?} for logits {:?}", mask.shape(), xv.shape())));
        }
        let mut out = Tensor2::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            ops::softmax_row(xv.row(r), Some(mask.row(r)), out.row_mut(r))?;
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// `p * a + (1 - p) * b` with `p` a column broadcast across each row.
    pub fn mix(&mut self, p: Var, a: Var, b: Var) -> Result<Var> {
        let (pv, av, bv) = (self.value(p), self.value(a), self.value(b));
        if pv.cols() != 1 || pv.rows() != av.rows() || av.shape() != bv.shape() {
            return Err(Error::Shape(format!("mix {:?} {:?} {:?}", pv.shape(), av.shape(), bv.shape())));
        }
        let mut out = Tensor2::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let w = pv.get(r, 0);
            let (ar, br) = (av.row(r), bv.row(r));
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = w * ar[c] + (T::one() - w) * br[c];
            }
        }
        Ok(self.push(out, Op::Mix { p, a, b }))
    }

    /// Column of `ln x[r, idx[r]]`.
    pub fn log_pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.len() != xv.rows() || idx.iter().any(|&c| c >= xv.cols()) {
            return Err(Error::Shape(format!("pick {} indices from {:?}", idx.len(), xv.shape())));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| xv.get(r, c).ln()).collect();
        let out = Tensor2::from_vec(idx.len(), 1, data)?;
        Ok(self.push(out, Op::LogPick { x, idx: idx.to_vec() }))
    }

    /// Scalar `sum_i w_i x_i` over all entries.
    pub fn weighted_sum(&mut self, x: Var, w: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if w.len() != xv.len() {
            return Err(Error::Shape(format!("{} weights for {} entries", w.len(), xv.len())));
        }
        let total: T = xv.data().iter().zip(w).map(|(&a, &b)| a * b).sum();
        let out = Tensor2::from_vec(1, 1, vec![total])?;
        Ok(self.push(out, Op::WeightedSum { x, w: w.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(Error::Shape(format!("rows {start}..{end} of {:?}", xv.shape())));
        }
        let out = xv.slice_rows(start, end);
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Shape(format!("concat rows with {} vs {cols} columns", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor2::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Backpropagates `seed * d(root)` and adds the parameter gradients into
    /// `store`. `root` must be a scalar.
    pub fn backward(&self, root: Var, seed: T, store: &mut ParamStore<T>) -> Result<()> {
        if !self.recording {
            return Err(Error::GradientUnavailable("tape was built in inference mode".into()));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::GradientUnavailable(format!("variable {} not recorded on this tape", root.0)));
        }
        if self.value(root).shape() != (1, 1) {
            return Err(Error::GradientUnavailable(format!(
                "backward from non-scalar {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor2::filled(1, 1, seed));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor2<T>>], v: Var, g: Tensor2<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul { a, b, transpose_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if *transpose_b {
                        // C = A B^T: dA = dC B, dB = dC^T A
                        let mut ga = Tensor2::zeros(av.rows(), av.cols());
                        gemm_acc(&g, false, bv, false, T::one(), &mut ga);
                        let mut gb = Tensor2::zeros(bv.rows(), bv.cols());
                        gemm_acc(&g, true, av, false, T::one(), &mut gb);
                        acc(&mut grads, *a, ga);
                        acc(&mut grads, *b, gb);
                    } else {
                        let mut ga = Tensor2::zeros(av.rows(), av.cols());
                        gemm_acc(&g, false, bv, true, T::one(), &mut ga);
                        let mut gb = Tensor2::zeros(bv.rows(), bv.cols());
                        gemm_acc(av, true, &g, false, T::one(), &mut gb);
                        acc(&mut grads, *a, ga);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(x, bias) => {
                    let mut gb = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *x, g);
                    acc(&mut grads, *bias, gb);
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    acc(&mut grads, *x, g.map(|v| v * f));
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (o, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= T::zero() {
                            *o = T::zero();
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    for (o, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *o *= T::one() - y * y;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (o, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *o *= y * (T::one() - y);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Attention { q, k, v, heads, groups, weights } => {
                    let (gq, gk, gv) = ops::attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        *heads,
                        *groups,
                        weights,
                        &g,
                    );
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::LayerNorm { x, gain, shift, xhat, rstd } => {
                    let (gx, ggain, gshift) = ops::layer_norm_backward(xhat, rstd, self.value(*gain).data(), &g);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gain, Tensor2::row_vector(ggain));
                    acc(&mut grads, *shift, Tensor2::row_vector(gshift));
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut gx = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        ops::softmax_row_backward(y.row(r), g.row(r), gx.row_mut(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Mix { p, a, b } => {
                    let (pv, av, bv) = (self.value(*p), self.value(*a), self.value(*b));
                    let mut gp = Tensor2::zeros(pv.rows(), 1);
                    let mut ga = Tensor2::zeros(av.rows(), av.cols());
                    let mut gb = Tensor2::zeros(bv.rows(), bv.cols());
                    for r in 0..av.rows() {
                        let w = pv.get(r, 0);
                        let mut dp = T::zero();
                        for c in 0..av.cols() {
                            let gc = g.get(r, c);
                            dp += gc * (av.get(r, c) - bv.get(r, c));
                            ga.set(r, c, w * gc);
                            gb.set(r, c, (T::one() - w) * gc);
                        }
                        gp.set(r, 0, dp);
                    }
                    acc(&mut grads, *p, gp);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::LogPick { x, idx } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (r, &c) in idx.iter().enumerate() {
                        gx.set(r, c, g.get(r, 0) / xv.get(r, c));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::WeightedSum { x, w } => {
                    let xv = self.value(*x);
                    let s = g.get(0, 0);
                    let data = w.iter().map(|&wi| wi * s).collect();
                    acc(&mut grads, *x, Tensor2::from_vec(xv.rows(), xv.cols(), data)?);
                }
                Op::GroupScores { a, b, groups, scale } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ma, mb, d) = (av.rows() / groups, bv.rows() / groups, av.cols());
                    let mut ga = Tensor2::zeros(av.rows(), d);
                    let mut gb = Tensor2::zeros(bv.rows(), d);
                    for grp in 0..*groups {
                        let gs = &g.data()[grp * ma * mb..(grp + 1) * ma * mb];
                        let a_blk = &av.data()[grp * ma * d..(grp + 1) * ma * d];
                        let b_blk = &bv.data()[grp * mb * d..(grp + 1) * mb * d];
                        gemm_slice(ma, mb, d, gs, false, b_blk, false, *scale, &mut ga.data_mut()[grp * ma * d..(grp + 1) * ma * d]);
                        gemm_slice(mb, ma, d, gs, true, a_blk, false, *scale, &mut gb.data_mut()[grp * mb * d..(grp + 1) * mb * d]);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Pool { x, pool } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor2::zeros(xv.rows(), xv.cols());
                    for r in 0..pool.rows() {
                        let gr = g.row(r);
                        for &(src, w) in pool.row(r) {
                            for (o, &gc) in gx.row_mut(src).iter_mut().zip(gr) {
                                *o += w * gc;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor2::zeros(xv.rows(), xv.cols());
                    let c = xv.cols();
                    gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        acc(&mut grads, p, g.slice_rows(row, row + rows));
                        row += rows;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{central_difference, compare};
    use crate::numcore::ops::MASK_SENTINEL;
    use rand::{Rng, SeedableRng};

    #[test]
    fn sum_of_linear_gradient() {
        // loss = sum(x W) => dW = x^T 1
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor2::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let wv = tape.param(&store, w);
        let y = tape.matmul(x, wv).unwrap();
        let loss = tape.weighted_sum(y, &[1.0; 6]).unwrap();
        tape.backward(loss, 1.0, &mut store).unwrap();
        assert_eq!(store.grad(w).unwrap().data(), &[4.0, 4.0, 4.0, 6.0, 6.0, 6.0]);
    }

    #[test]
    fn square_chain_gradient() {
        // f(x) = x * x via matmul of 1x1 parameters.
        let mut store = ParamStore::<f64>::new();
        let x = store.insert("x", Tensor2::filled(1, 1, 3.0)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let y = tape.matmul(xv, xv).unwrap();
        tape.backward(y, 1.0, &mut store).unwrap();
        assert_eq!(store.grad(x).unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut store = ParamStore::<f64>::new();
        let x = store.insert("x", Tensor2::filled(1, 1, 3.0)).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.param(&store, x);
        assert!(matches!(tape.backward(xv, 1.0, &mut store), Err(Error::GradientUnavailable(_))));
        let other = Tape::<f64>::new();
        assert!(matches!(other.backward(xv, 1.0, &mut store), Err(Error::GradientUnavailable(_))));
    }

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Tensor2<f64> {
        Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Every op on one small graph, compared against central differences.
    fn composite_loss(tape: &mut Tape<f64>, store: &ParamStore<f64>, mask: &Tensor2<f64>) -> Var {
        let p = |t: &mut Tape<f64>, n: &str| t.param(store, store.id(n).unwrap());
        let x = p(tape, "x");
        let w = p(tape, "w");
        let b = p(tape, "b");
        let h = tape.linear(x, w, Some(b)).unwrap();
        let h = tape.relu(h);
        let (g, sh) = (p(tape, "gain"), p(tape, "shift"));
        let h = tape.layer_norm(h, g, sh).unwrap();
        let att = tape.attention(h, h, h, 2, Some(mask)).unwrap();
        let top = tape.slice_rows(att, 0, 2).unwrap();
        let rest = tape.slice_rows(h, 2, 4).unwrap();
        let h2 = tape.concat_rows(&[top, rest]).unwrap();
        let sum = tape.add(h2, h).unwrap();
        let logits = tape.matmul_nt(sum, h).unwrap();
        let logits = tape.tanh(logits);
        let logits = tape.scale(logits, 3.0);
        let probs = tape.softmax_masked(logits, mask).unwrap();
        let gate_in = tape.slice_rows(sum, 0, 4).unwrap();
        let gw = p(tape, "gw");
        let gate = tape.matmul(gate_in, gw).unwrap();
        let gate = tape.sigmoid(gate);
        let uniform = tape.constant(Tensor2::filled(4, 4, 0.25));
        let mixed = tape.mix(gate, probs, uniform).unwrap();
        let lp = tape.log_pick(mixed, &[0, 1, 2, 0]).unwrap();
        tape.weighted_sum(lp, &[0.7, -1.3, 0.4, 2.0]).unwrap()
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        store.insert("x", random(&mut rng, 4, 3)).unwrap();
        store.insert("w", random(&mut rng, 3, 4)).unwrap();
        store.insert("b", random(&mut rng, 1, 4)).unwrap();
        store.insert("gain", random(&mut rng, 1, 4)).unwrap();
        store.insert("shift", random(&mut rng, 1, 4)).unwrap();
        store.insert("gw", random(&mut rng, 4, 1)).unwrap();
        let mut mask = Tensor2::zeros(4, 4);
        mask.set(0, 3, MASK_SENTINEL);
        mask.set(2, 1, MASK_SENTINEL);

        let mut tape = Tape::new();
        let loss = composite_loss(&mut tape, &store, &mask);
        tape.backward(loss, 1.0, &mut store).unwrap();

        let eval = |st: &ParamStore<f64>| {
            let mut t = Tape::inference();
            let l = composite_loss(&mut t, st, &mask);
            t.value(l).get(0, 0)
        };
        let numeric = central_difference(&store, eval, 1e-4);
        let report = compare(&store, &numeric, 1e-6);
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }

    fn grouped_loss(tape: &mut Tape<f64>, store: &ParamStore<f64>, mask: &Tensor2<f64>) -> Var {
        let p = |t: &mut Tape<f64>, n: &str| t.param(store, store.id(n).unwrap());
        let (q, kv) = (p(tape, "q"), p(tape, "kv"));
        let att = tape.attention_grouped(q, kv, kv, 2, 2, Some(mask)).unwrap();
        let scores = tape.group_scores(att, kv, 2, 0.5).unwrap();
        let mut pool = RowPool::new();
        pool.push_row([(0, 0.5), (3, -1.5)]);
        pool.push_mean(&[1, 2, 3]);
        pool.push_row([(2, 1.0)]);
        let pooled = tape.pool_rows(scores, pool).unwrap();
        let t = tape.tanh(pooled);
        tape.weighted_sum(t, &[0.3, -0.8, 1.1, 0.5, 0.9, -0.2, 0.4, 0.6, -1.0]).unwrap()
    }

    #[test]
    fn grouped_ops_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        store.insert("q", random(&mut rng, 4, 4)).unwrap();
        store.insert("kv", random(&mut rng, 6, 4)).unwrap();
        let mut mask = Tensor2::zeros(4, 3);
        mask.set(1, 0, MASK_SENTINEL);
        mask.set(3, 2, MASK_SENTINEL);

        let mut tape = Tape::new();
        let loss = grouped_loss(&mut tape, &store, &mask);
        tape.backward(loss, 1.0, &mut store).unwrap();
        let eval = |st: &ParamStore<f64>| {
            let mut t = Tape::inference();
            let l = grouped_loss(&mut t, st, &mask);
            t.value(l).get(0, 0)
        };
        let numeric = central_difference(&store, eval, 1e-4);
        let report = compare(&store, &numeric, 1e-6);
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }

    #[test]
    fn grouped_attention_matches_separate_calls() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (q, k) = (random(&mut rng, 4, 4), random(&mut rng, 6, 4));
        let (joint, _) = ops::attention_forward(&q, &k, &k, 2, 2, None).unwrap();
        for g in 0..2 {
            let (part, _) =
                ops::attention_forward(&q.slice_rows(2 * g, 2 * g + 2), &k.slice_rows(3 * g, 3 * g + 3), &k.slice_rows(3 * g, 3 * g + 3), 2, 1, None)
                    .unwrap();
            assert_eq!(part, joint.slice_rows(2 * g, 2 * g + 2));
        }
    }
}
