//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive application in creation order, which is
//! a topological order by construction. [`Tape::backward`] walks it in reverse
//! once. Gradients of leaves accumulate across calls until [`Tape::zero_grad`].

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use super::tensor::{softmax_in_place, Scalar, Tensor};

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul { a: usize, b: usize, ta: bool, tb: bool },
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    Scale(usize, T),
    MulScalar { a: usize, s: usize },
    Exp(usize),
    ClampMax(usize, T),
    Sum(usize),
    MeanRows(usize),
    RowSoftmax(usize),
    CausalMask(usize, MaskLayout),
    LayerNorm { a: usize, inv_std: Vec<T> },
    Gelu(usize),
    Dropout { a: usize, mask: Vec<T> },
    Gather { a: usize, idx: Vec<usize> },
    ConcatRows(Vec<usize>),
    L2Normalize { a: usize, norms: Vec<T> },
    CrossEntropy { a: usize, targets: Vec<usize>, probs: Tensor<T> },
    Rope { a: usize, positions: Vec<usize>, heads: usize, d_head: usize, base: f64 },
    AttnScores { q: usize, k: usize, dims: AttnDims },
    AttnMix { a: usize, v: usize, dims: AttnDims },
}

/// Shapes of a batched multi-head attention computation.
///
/// Queries are stored as `[batch * n_query, heads * d_head]`, keys and values
/// as `[batch * n_key, heads * d_head]`, and score matrices as
/// `[batch * heads * n_query, n_key]` with block `(b, h)` at block index
/// `b * heads + h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub n_query: usize,
    pub n_key: usize,
    pub heads: usize,
    pub d_head: usize,
}

impl AttnDims {
    fn score_block(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.n_query
    }
}

/// Causal masking of stacked `[groups * n_query, n_key]` score blocks. Query
/// row `i` sits at absolute position `query_offset + i`; keys beyond it are
/// masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskLayout {
    pub n_query: usize,
    pub n_key: usize,
    pub query_offset: usize,
}

impl MaskLayout {
    fn masked(&self, row: usize, col: usize) -> bool {
        col > self.query_offset + row % self.n_query
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a computation. Create one per forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), leaf_grads: RefCell::new(Vec::new()) }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let rg = self.needs(inputs);
        self.push(value, op, rg)
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.leaf_grads.borrow().get(var.id).cloned().flatten()
    }

    /// Gradient of a leaf, zeros when it was disconnected from the loss.
    pub fn grad_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.grad(var).unwrap_or_else(|| Tensor::zeros(var.value().shape().to_vec()))
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&self, loss: Var<'_, T>) {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward() requires a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), T::one()));
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize_with(nodes.len(), || None);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |target: usize, t: Tensor<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
            match &node.op {
                Op::Leaf => match &mut leaf_grads[id] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                &Op::Matmul { a, b, ta, tb } => {
                    let (av, bv) = (val(a), val(b));
                    if nodes[a].requires_grad {
                        let da = if ta { bv.matmul_t(tb, &g, true) } else { g.matmul_t(false, bv, !tb) };
                        acc(a, da);
                    }
                    if nodes[b].requires_grad {
                        let db = if tb { g.matmul_t(true, av, ta) } else { av.matmul_t(!ta, &g, false) };
                        acc(b, db);
                    }
                }
                &Op::Transpose(a) => acc(a, g.transpose()),
                &Op::Add(a, b) => {
                    acc(a, g.clone());
                    acc(b, g);
                }
                &Op::Sub(a, b) => {
                    acc(a, g.clone());
                    acc(b, g.scale(-T::one()));
                }
                &Op::Mul(a, b) => {
                    acc(a, g.zip_map(val(b), |x, y| x * y));
                    acc(b, g.zip_map(val(a), |x, y| x * y));
                }
                &Op::AddRow { a, row } => {
                    let cols = g.cols();
                    let mut dr = vec![T::zero(); cols];
                    for r in 0..g.rows() {
                        for (d, &x) in dr.iter_mut().zip(g.row(r)) {
                            *d = *d + x;
                        }
                    }
                    acc(row, Tensor::new(val(row).shape().to_vec(), dr));
                    acc(a, g);
                }
                &Op::MulRow { a, row } => {
                    let (av, rv) = (val(a), val(row));
                    let cols = g.cols();
                    let mut dr = vec![T::zero(); cols];
                    let mut da = g.clone();
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let ar = av.row(r);
                        for j in 0..cols {
                            dr[j] = dr[j] + gr[j] * ar[j];
                        }
                        for (d, &w) in da.row_mut(r).iter_mut().zip(rv.data()) {
                            *d = *d * w;
                        }
                    }
                    acc(row, Tensor::new(rv.shape().to_vec(), dr));
                    acc(a, da);
                }
                &Op::Scale(a, s) => acc(a, g.scale(s)),
                &Op::MulScalar { a, s } => {
                    let sv = val(s).item();
                    let ds: T = g.data().iter().zip(val(a).data()).map(|(&x, &y)| x * y).sum();
                    acc(s, Tensor::new(val(s).shape().to_vec(), vec![ds]));
                    acc(a, g.scale(sv));
                }
                &Op::Exp(a) => acc(a, g.zip_map(&node.value, |x, y| x * y)),
                &Op::ClampMax(a, c) => {
                    let da = g.zip_map(val(a), |x, y| if y > c { T::zero() } else { x });
                    acc(a, da);
                }
                &Op::Sum(a) => acc(a, Tensor::full(val(a).shape().to_vec(), g.item())),
                &Op::MeanRows(a) => {
                    let av = val(a);
                    let m = T::of(av.rows() as f64);
                    let mut da = Tensor::zeros(av.shape().to_vec());
                    for r in 0..av.rows() {
                        for (d, &x) in da.row_mut(r).iter_mut().zip(g.data()) {
                            *d = x / m;
                        }
                    }
                    acc(a, da);
                }
                &Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut da = g.clone();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let s: T = g.row(r).iter().zip(yr).map(|(&x, &p)| x * p).sum();
                        for (d, &p) in da.row_mut(r).iter_mut().zip(yr) {
                            *d = p * (*d - s);
                        }
                    }
                    acc(a, da);
                }
                &Op::CausalMask(a, layout) => {
                    let mut da = g;
                    let cols = da.cols();
                    for r in 0..da.rows() {
                        for (c, d) in da.row_mut(r).iter_mut().enumerate().take(cols) {
                            if layout.masked(r, c) {
                                *d = T::zero();
                            }
                        }
                    }
                    acc(a, da);
                }
                Op::LayerNorm { a, inv_std } => {
                    let y = &node.value;
                    let n = T::of(y.cols() as f64);
                    let mut da = g.clone();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mg = gr.iter().copied().sum::<T>() / n;
                        let mgy = gr.iter().zip(yr).map(|(&x, &p)| x * p).sum::<T>() / n;
                        for ((d, &gx), &yx) in da.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = inv_std[r] * (gx - mg - yx * mgy);
                        }
                    }
                    acc(*a, da);
                }
                &Op::Gelu(a) => {
                    let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                    let half = T::of(0.5);
                    let da = g.zip_map(val(a), |gx, x| {
                        let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                        let pdf = (-(x * x) * half).exp() * inv_sqrt_2pi;
                        gx * (cdf + x * pdf)
                    });
                    acc(a, da);
                }
                Op::Dropout { a, mask } => {
                    let mut da = g;
                    for (d, &m) in da.data_mut().iter_mut().zip(mask) {
                        *d = *d * m;
                    }
                    acc(*a, da);
                }
                Op::Gather { a, idx } => {
                    let mut da = Tensor::zeros(val(*a).shape().to_vec());
                    for (r, &src) in idx.iter().enumerate() {
                        for (d, &x) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *d = *d + x;
                        }
                    }
                    acc(*a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = val(p).rows();
                        let piece = g.slice_rows(start, start + rows).reshape(val(p).shape().to_vec());
                        acc(p, piece);
                        start += rows;
                    }
                }
                Op::L2Normalize { a, norms } => {
                    let y = &node.value;
                    let mut da = g.clone();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let s: T = g.row(r).iter().zip(yr).map(|(&x, &p)| x * p).sum();
                        for (d, &p) in da.row_mut(r).iter_mut().zip(yr) {
                            *d = (*d - p * s) / norms[r];
                        }
                    }
                    acc(*a, da);
                }
                Op::CrossEntropy { a, targets, probs } => {
                    let m = T::of(targets.len() as f64);
                    let scale = g.item() / m;
                    let mut da = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = da.row_mut(r);
                        row[t] = row[t] - T::one();
                        for x in row.iter_mut() {
                            *x = *x * scale;
                        }
                    }
                    acc(*a, da);
                }
                Op::Rope { a, positions, heads, d_head, base } => {
                    let da = rope_apply(&g, positions, *heads, *d_head, *base, true);
                    acc(*a, da);
                }
                &Op::AttnScores { q, k, dims } => {
                    let (qv, kv) = (val(q), val(k));
                    if nodes[q].requires_grad {
                        acc(q, scores_grad_query(&g, kv, dims));
                    }
                    if nodes[k].requires_grad {
                        acc(k, scores_grad_key(&g, qv, dims));
                    }
                }
                &Op::AttnMix { a, v, dims } => {
                    let (av, vv) = (val(a), val(v));
                    if nodes[a].requires_grad {
                        acc(a, mix_grad_weights(&g, vv, dims));
                    }
                    if nodes[v].requires_grad {
                        acc(v, mix_grad_values(&g, av, dims));
                    }
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(self, other: Var<'t, T>) -> Var<'t, T> {
        self.matmul_t(false, other, false)
    }

    /// `op(self) * op(other)`; `ta`/`tb` select transposition without copying.
    pub fn matmul_t(self, ta: bool, other: Var<'t, T>, tb: bool) -> Var<'t, T> {
        self.same_tape(&other);
        let out = self.value().matmul_t(ta, &other.value(), tb);
        self.tape.record(out, Op::Matmul { a: self.id, b: other.id, ta, tb }, &[self.id, other.id])
    }

    pub fn transpose(self) -> Var<'t, T> {
        let out = self.value().transpose();
        self.tape.record(out, Op::Transpose(self.id), &[self.id])
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        self.same_tape(&other);
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape.record(out, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        self.same_tape(&other);
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape.record(out, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        self.same_tape(&other);
        let out = self.value().zip_map(&other.value(), |a, b| a * b);
        self.tape.record(out, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(self, row: Var<'t, T>) -> Var<'t, T> {
        let rv = row.value();
        let mut out = (*self.value()).clone();
        assert_eq!(rv.len(), out.cols(), "row broadcast length mismatch");
        for r in 0..out.rows() {
            for (x, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *x = *x + b;
            }
        }
        self.tape.record(out, Op::AddRow { a: self.id, row: row.id }, &[self.id, row.id])
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(self, row: Var<'t, T>) -> Var<'t, T> {
        let rv = row.value();
        let mut out = (*self.value()).clone();
        assert_eq!(rv.len(), out.cols(), "row broadcast length mismatch");
        for r in 0..out.rows() {
            for (x, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *x = *x * b;
            }
        }
        self.tape.record(out, Op::MulRow { a: self.id, row: row.id }, &[self.id, row.id])
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = self.value().scale(s);
        self.tape.record(out, Op::Scale(self.id, s), &[self.id])
    }

    /// Multiplies by a one-element variable.
    pub fn mul_scalar(self, s: Var<'t, T>) -> Var<'t, T> {
        let sv = s.value().item();
        let out = self.value().scale(sv);
        self.tape.record(out, Op::MulScalar { a: self.id, s: s.id }, &[self.id, s.id])
    }

    pub fn exp(self) -> Var<'t, T> {
        let out = self.value().map(|x| x.exp());
        self.tape.record(out, Op::Exp(self.id), &[self.id])
    }

    /// `min(x, c)`; the gradient is zero where the clamp is active.
    pub fn clamp_max(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| x.min(c));
        self.tape.record(out, Op::ClampMax(self.id, c), &[self.id])
    }

    pub fn sum(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.record(out, Op::Sum(self.id), &[self.id])
    }

    /// Column means, `[m, n] -> [1, n]`.
    pub fn mean_rows(self) -> Var<'t, T> {
        let v = self.value();
        let m = T::of(v.rows() as f64);
        let mut out = vec![T::zero(); v.cols()];
        for r in 0..v.rows() {
            for (o, &x) in out.iter_mut().zip(v.row(r)) {
                *o = *o + x;
            }
        }
        let out = Tensor::new([1, v.cols()], out.into_iter().map(|x| x / m).collect());
        self.tape.record(out, Op::MeanRows(self.id), &[self.id])
    }

    pub fn row_softmax(self) -> Var<'t, T> {
        let mut out = (*self.value()).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.tape.record(out, Op::RowSoftmax(self.id), &[self.id])
    }

    /// Sets future-position scores to `-inf`.
    pub fn causal_mask(self, layout: MaskLayout) -> Var<'t, T> {
        let mut out = (*self.value()).clone();
        assert_eq!(out.cols(), layout.n_key, "mask key count mismatch");
        for r in 0..out.rows() {
            for (c, x) in out.row_mut(r).iter_mut().enumerate() {
                if layout.masked(r, c) {
                    *x = T::neg_infinity();
                }
            }
        }
        self.tape.record(out, Op::CausalMask(self.id, layout), &[self.id])
    }

    /// Row standardization without the affine part (eps = 1e-5).
    pub fn layer_norm(self) -> Var<'t, T> {
        let v = self.value();
        let n = T::of(v.cols() as f64);
        let eps = T::of(1e-5);
        let mut out = (*v).clone();
        let mut inv_std = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        self.tape.record(out, Op::LayerNorm { a: self.id, inv_std }, &[self.id])
    }

    /// Exact GeLU, `x * Phi(x)`.
    pub fn gelu(self) -> Var<'t, T> {
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let half = T::of(0.5);
        let out = self.value().map(|x| x * half * (T::one() + (x * inv_sqrt2).erf()));
        self.tape.record(out, Op::Gelu(self.id), &[self.id])
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng>(self, p: f64, train: bool, rng: &mut R) -> Var<'t, T> {
        assert!((0.0..1.0).contains(&p), "dropout rate must lie in [0, 1)");
        if !train || p == 0.0 {
            return self;
        }
        let v = self.value();
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..v.len()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect());
        self.tape.record(out, Op::Dropout { a: self.id, mask }, &[self.id])
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t, T> {
        let v = self.value();
        let cols = v.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < v.rows(), "row index {i} out of range for {} rows", v.rows());
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::new([idx.len(), cols], data);
        self.tape.record(out, Op::Gather { a: self.id, idx: idx.to_vec() }, &[self.id])
    }

    /// Embedding table lookup: `self` is `[vocab, d]`.
    pub fn embedding_lookup(self, ids: &[usize]) -> Var<'t, T> {
        self.gather_rows(ids)
    }

    pub fn concat_rows(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let tape = parts[0].tape;
        let cols = parts[0].value().cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            p.same_tape(&parts[0]);
            let v = p.value();
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.record(Tensor::new([rows, cols], data), Op::ConcatRows(ids.clone()), &ids)
    }

    /// Scales every row to unit Euclidean norm. Panics on a zero row.
    pub fn l2_normalize_rows(self) -> Var<'t, T> {
        let mut out = (*self.value()).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            assert!(n > T::zero(), "cosine undefined for a zero-norm row");
            for x in row.iter_mut() {
                *x = *x / n;
            }
            norms.push(n);
        }
        self.tape.record(out, Op::L2Normalize { a: self.id, norms }, &[self.id])
    }

    /// Mean softmax cross-entropy of each row against its target column.
    pub fn cross_entropy_rows(self, targets: &[usize]) -> Var<'t, T> {
        let v = self.value();
        assert_eq!(v.rows(), targets.len(), "one target per row");
        let mut probs = (*v).clone();
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < v.cols(), "target out of range");
            let row = probs.row_mut(r);
            softmax_in_place(row);
            let max = v.row(r).iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + v.row(r).iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            loss = loss + lse - v.row(r)[t];
        }
        let out = Tensor::scalar(loss / T::of(targets.len() as f64));
        self.tape.record(out, Op::CrossEntropy { a: self.id, targets: targets.to_vec(), probs }, &[self.id])
    }

    /// Rotary position embedding applied per head to `[rows, heads * d_head]`.
    pub fn rope(self, positions: &[usize], heads: usize, d_head: usize, base: f64) -> Var<'t, T> {
        let out = rope_apply(&self.value(), positions, heads, d_head, base, false);
        let op = Op::Rope { a: self.id, positions: positions.to_vec(), heads, d_head, base };
        self.tape.record(out, op, &[self.id])
    }

    /// Per-(sample, head) `Q K^T` score blocks; see [`AttnDims`].
    pub fn attn_scores(self, keys: Var<'t, T>, dims: AttnDims) -> Var<'t, T> {
        let out = attn_scores_forward(&self.value(), &keys.value(), dims);
        self.tape.record(out, Op::AttnScores { q: self.id, k: keys.id, dims }, &[self.id, keys.id])
    }

    /// Per-(sample, head) `A V`, heads concatenated along columns.
    pub fn attn_mix(self, values: Var<'t, T>, dims: AttnDims) -> Var<'t, T> {
        let out = attn_mix_forward(&self.value(), &values.value(), dims);
        self.tape.record(out, Op::AttnMix { a: self.id, v: values.id, dims }, &[self.id, values.id])
    }
}

/// Rotates interleaved coordinate pairs `(2i, 2i+1)` of each head by
/// `position * base^(-2i / d_head)`; `inverse` rotates the other way.
pub fn rope_apply<T: Scalar>(
    x: &Tensor<T>,
    positions: &[usize],
    heads: usize,
    d_head: usize,
    base: f64,
    inverse: bool,
) -> Tensor<T> {
    assert!(d_head.is_multiple_of(2), "rope needs an even head dimension");
    assert_eq!(x.cols(), heads * d_head, "rope width mismatch");
    assert_eq!(x.rows(), positions.len(), "one position per row");
    let mut out = x.clone();
    let sign = if inverse { -1.0 } else { 1.0 };
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let row = out.row_mut(r);
        for i in 0..d_head / 2 {
            let theta = base.powf(-2.0 * i as f64 / d_head as f64);
            let angle = sign * pos as f64 * theta;
            let (s, c) = (T::of(angle.sin()), T::of(angle.cos()));
            for h in 0..heads {
                let j = h * d_head + 2 * i;
                let (a, b) = (row[j], row[j + 1]);
                row[j] = a * c - b * s;
                row[j + 1] = a * s + b * c;
            }
        }
    }
    out
}

fn width(d: &AttnDims) -> usize {
    d.heads * d.d_head
}

fn attn_scores_forward<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, d: AttnDims) -> Tensor<T> {
    let w = width(&d);
    assert_eq!(q.shape(), &[d.batch * d.n_query, w], "query shape");
    assert_eq!(k.shape(), &[d.batch * d.n_key, w], "key shape");
    let mut out = Tensor::zeros([d.batch * d.heads * d.n_query, d.n_key]);
    let optr: *mut T = out.data_mut().as_mut_ptr();
    for b in 0..d.batch {
        for h in 0..d.heads {
            // SAFETY: each block writes a disjoint n_query x n_key region.
            unsafe {
                T::gemm(
                    d.n_query,
                    d.d_head,
                    d.n_key,
                    T::one(),
                    q.data().as_ptr().add(b * d.n_query * w + h * d.d_head),
                    w as isize,
                    1,
                    k.data().as_ptr().add(b * d.n_key * w + h * d.d_head),
                    1,
                    w as isize,
                    T::zero(),
                    optr.add(d.score_block(b, h) * d.n_key),
                    d.n_key as isize,
                    1,
                );
            }
        }
    }
    out
}

fn scores_grad_query<T: Scalar>(g: &Tensor<T>, k: &Tensor<T>, d: AttnDims) -> Tensor<T> {
    let w = width(&d);
    let mut out = Tensor::zeros([d.batch * d.n_query, w]);
    let optr: *mut T = out.data_mut().as_mut_ptr();
    for b in 0..d.batch {
        for h in 0..d.heads {
            // dQ_bh = dS_bh K_bh
            unsafe {
                T::gemm(
                    d.n_query,
                    d.n_key,
                    d.d_head,
                    T::one(),
                    g.data().as_ptr().add(d.score_block(b, h) * d.n_key),
                    d.n_key as isize,
                    1,
                    k.data().as_ptr().add(b * d.n_key * w + h * d.d_head),
                    w as isize,
                    1,
                    T::zero(),
                    optr.add(b * d.n_query * w + h * d.d_head),
                    w as isize,
                    1,
                );
            }
        }
    }
    out
}

fn scores_grad_key<T: Scalar>(g: &Tensor<T>, q: &Tensor<T>, d: AttnDims) -> Tensor<T> {
    let w = width(&d);
    let mut out = Tensor::zeros([d.batch * d.n_key, w]);
    let optr: *mut T = out.data_mut().as_mut_ptr();
    for b in 0..d.batch {
        for h in 0..d.heads {
            // dK_bh = dS_bh^T Q_bh
            unsafe {
                T::gemm(
                    d.n_key,
                    d.n_query,
                    d.d_head,
                    T::one(),
                    g.data().as_ptr().add(d.score_block(b, h) * d.n_key),
                    1,
                    d.n_key as isize,
                    q.data().as_ptr().add(b * d.n_query * w + h * d.d_head),
                    w as isize,
                    1,
                    T::zero(),
                    optr.add(b * d.n_key * w + h * d.d_head),
                    w as isize,
                    1,
                );
            }
        }
    }
    out
}

fn attn_mix_forward<T: Scalar>(a: &Tensor<T>, v: &Tensor<T>, d: AttnDims) -> Tensor<T> {
    let w = width(&d);
    assert_eq!(a.shape(), &[d.batch * d.heads * d.n_query, d.n_key], "weights shape");
    assert_eq!(v.shape(), &[d.batch * d.n_key, w], "value shape");
    let mut out = Tensor::zeros([d.batch * d.n_query, w]);
    let optr: *mut T = out.data_mut().as_mut_ptr();
    for b in 0..d.batch {
        for h in 0..d.heads {
            unsafe {
                T::gemm(
                    d.n_query,
                    d.n_key,
                    d.d_head,
                    T::one(),
                    a.data().as_ptr().add(d.score_block(b, h) * d.n_key),
                    d.n_key as isize,
                    1,
                    v.data().as_ptr().add(b * d.n_key * w + h * d.d_head),
                    w as isize,
                    1,
                    T::zero(),
                    optr.add(b * d.n_query * w + h * d.d_head),
                    w as isize,
                    1,
                );
            }
        }
    }
    out
}

fn mix_grad_weights<T: Scalar>(g: &Tensor<T>, v: &Tensor<T>, d: AttnDims) -> Tensor<T> {
    let w = width(&d);
    let mut out = Tensor::zeros([d.batch * d.heads * d.n_query, d.n_key]);
    let optr: *mut T = out.data_mut().as_mut_ptr();
    for b in 0..d.batch {
        for h in 0..d.heads {
            // dA_bh = dO_bh V_bh^T
            unsafe {
                T::gemm(
                    d.n_query,
                    d.d_head,
                    d.n_key,
                    T::one(),
                    g.data().as_ptr().add(b * d.n_query * w + h * d.d_head),
                    w as isize,
                    1,
                    v.data().as_ptr().add(b * d.n_key * w + h * d.d_head),
                    1,
                    w as isize,
                    T::zero(),
                    optr.add(d.score_block(b, h) * d.n_key),
                    d.n_key as isize,
                    1,
                );
            }
        }
    }
    out
}

fn mix_grad_values<T: Scalar>(g: &Tensor<T>, a: &Tensor<T>, d: AttnDims) -> Tensor<T> {
    let w = width(&d);
    let mut out = Tensor::zeros([d.batch * d.n_key, w]);
    let optr: *mut T = out.data_mut().as_mut_ptr();
    for b in 0..d.batch {
        for h in 0..d.heads {
            // dV_bh = A_bh^T dO_bh
            unsafe {
                T::gemm(
                    d.n_key,
                    d.n_query,
                    d.d_head,
                    T::one(),
                    a.data().as_ptr().add(d.score_block(b, h) * d.n_key),
                    1,
                    d.n_key as isize,
                    g.data().as_ptr().add(b * d.n_query * w + h * d.d_head),
                    w as isize,
                    1,
                    T::zero(),
                    optr.add(b * d.n_key * w + h * d.d_head),
                    w as isize,
                    1,
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn sum_gradient_is_all_ones_and_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(2, 3, |i, j| (i + j) as f64));
        let loss = x.sum();
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 6]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full([2, 2], 1.0));
        let y = tape.param(Tensor::full([2, 2], 3.0));
        tape.backward(x.sum());
        assert!(tape.grad(y).is_none());
        assert_eq!(tape.grad_or_zeros(y).data(), &[0.0; 4]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn non_scalar_loss_panics() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full([2, 2], 1.0));
        tape.backward(x);
    }

    #[test]
    fn analytic_identities() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros([1, 3]));
        let s = z.row_softmax().value();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(z.gelu().value().data(), &[0.0; 3]);
        let c = tape.constant(Tensor::full([2, 5], 4.2));
        assert!(c.layer_norm().value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dropout_is_identity_when_disabled() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(3, 3, |i, j| (i * 3 + j) as f32));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(x.dropout(0.5, false, &mut rng).id(), x.id());
        assert_eq!(x.dropout(0.0, true, &mut rng).id(), x.id());
        let d = x.dropout(0.5, true, &mut rng).value();
        for (&a, &b) in d.data().iter().zip(x.value().data()) {
            assert!(a == 0.0 || a == 2.0 * b);
        }
    }

    #[test]
    #[should_panic(expected = "zero-norm")]
    fn zero_row_normalize_panics() {
        let tape = Tape::<f64>::new();
        tape.constant(Tensor::zeros([1, 3])).l2_normalize_rows();
    }

    #[test]
    fn causal_mask_zeroes_future_attention() {
        let tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::from_fn(8, 4, |i, j| (i * 7 + j * 3) as f64 * 0.1));
        let a = s.causal_mask(MaskLayout { n_query: 4, n_key: 4, query_offset: 0 }).row_softmax().value();
        for r in 0..8 {
            for c in 0..4 {
                if c > r % 4 {
                    assert_eq!(a.at(r, c), 0.0);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let tape = Tape::<f64>::new();
            let s = tape.constant(Tensor::new([3, 4], vals.clone())).row_softmax().value();
            for r in 0..3 {
                prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let tape32 = Tape::<f32>::new();
            let v32: Vec<f32> = vals.iter().map(|&x| x as f32).collect();
            let s = tape32.constant(Tensor::new([3, 4], v32)).row_softmax().value();
            for r in 0..3 {
                prop_assert!((s.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn rope_preserves_norm_and_relative_products(
            q in proptest::collection::vec(-1.0f64..1.0, 8),
            k in proptest::collection::vec(-1.0f64..1.0, 8),
            a in 0usize..40,
            b in 0usize..40,
        ) {
            let qt = Tensor::new([1, 8], q.clone());
            let kt = Tensor::new([1, 8], k.clone());
            let qa = rope_apply(&qt, &[a], 1, 8, 10000.0, false);
            prop_assert!((qa.norm() - qt.norm()).abs() < 1e-6);
            let kb = rope_apply(&kt, &[b], 1, 8, 10000.0, false);
            let lhs: f64 = qa.data().iter().zip(kb.data()).map(|(x, y)| x * y).sum();
            // <R_a q, R_b k> = <q, R_{b-a} k>, using the inverse rotation when b < a.
            let rel = if b >= a {
                rope_apply(&kt, &[b - a], 1, 8, 10000.0, false)
            } else {
                rope_apply(&kt, &[a - b], 1, 8, 10000.0, true)
            };
            let rhs: f64 = q.iter().zip(rel.data()).map(|(x, y)| x * y).sum();
            prop_assert!((lhs - rhs).abs() < 1e-5);
        }
    }
}
