//! Tape-based reverse-mode differentiation.
//!
//! Ops are recorded in execution order, which is a topological order, and
//! `backward` walks them once in reverse. Forward values are computed with
//! the same kernels the inference path uses.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Silu(usize),
    RmsNorm { x: usize, gain: usize, inv: Vec<T> },
    SoftmaxRows(usize),
    Rope { x: usize, start: usize, n_heads: usize, base: f64 },
    Attention { q: usize, k: usize, v: usize, n_heads: usize, probs: Vec<T> },
    Gather { table: usize, ids: Vec<usize> },
    SelectRows { x: usize, rows: Vec<usize> },
    ConcatRows(usize, usize),
    MaskedAdd { base: usize, delta: usize, mask: Vec<bool> },
    MeanRows(usize),
    Sum(usize),
    Bce { logit: usize, label: T, weight: T },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a forward computation.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`; `None` if `var` does not require
    /// gradients or was produced by an intermediate op.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index)?.as_deref()
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index)?.take()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a leaf. Shared tensors are not copied.
    pub fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(ia, ib), &[ia, ib]))
    }

    /// `a[m x k] * b[n x k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt {:?} x {:?}^T",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = kernels::matmul_nt(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(ia, ib), &[ia, ib]))
    }

    fn same_shape(&self, ia: usize, ib: usize, what: &str) -> Result<()> {
        if self.val(ia).shape() != self.val(ib).shape() {
            return Err(Error::shape(format!(
                "{what} {:?} vs {:?}",
                self.val(ia).shape(),
                self.val(ib).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "add")?;
        let (ta, tb) = (self.val(ia), self.val(ib));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(ia, ib), &[ia, ib]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "mul")?;
        let (ta, tb) = (self.val(ia), self.val(ib));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(ia, ib), &[ia, ib]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = self.val(ia);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * c).collect())?;
        Ok(self.push(out, Op::Scale(ia, c), &[ia]))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = self.val(ia);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| kernels::silu(x)).collect())?;
        Ok(self.push(out, Op::Silu(ia), &[ia]))
    }

    /// Row-wise RMS normalisation with a gain vector over the last dim.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (ix, ig) = (self.idx(x)?, self.idx(gain)?);
        let (tx, tg) = (self.val(ix), self.val(ig));
        let d = tx.cols();
        if tg.len() != d {
            return Err(Error::shape(format!("rms_norm gain {:?} for width {d}", tg.shape())));
        }
        let mut out = Tensor::zeros(tx.shape().to_vec());
        let mut inv = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            inv.push(kernels::rms_norm_row(tx.row(r), tg.data(), out.row_mut(r)));
        }
        Ok(self.push(out, Op::RmsNorm { x: ix, gain: ig, inv }, &[ix, ig]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let mut out = self.val(ix).clone();
        for r in 0..out.rows() {
            kernels::softmax_row(out.row_mut(r));
        }
        Ok(self.push(out, Op::SoftmaxRows(ix), &[ix]))
    }

    /// Rotary embedding; row `i` sits at absolute position `start + i`.
    pub fn rope(&mut self, x: Var, start: usize, n_heads: usize, base: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let mut out = self.val(ix).clone();
        let head_dim = out.cols() / n_heads.max(1);
        if n_heads == 0 || !out.cols().is_multiple_of(n_heads) || !head_dim.is_multiple_of(2) {
            return Err(Error::shape(format!("rope width {} with {n_heads} heads", out.cols())));
        }
        for r in 0..out.rows() {
            let (c, s) = kernels::rope_tables::<T>(start + r, head_dim, base);
            kernels::rope_row(out.row_mut(r), n_heads, &c, &s, false);
        }
        Ok(self.push(out, Op::Rope { x: ix, start, n_heads, base }, &[ix]))
    }

    /// Causal multi-head attention. The `nq` queries are the last `nq` of the
    /// `nk` key positions: query `i` sees keys `0..=nk - nq + i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let (tq, tk, tv) = (self.val(iq), self.val(ik), self.val(iv));
        let (nq, d, nk) = (tq.rows(), tq.cols(), tk.rows());
        if tk.cols() != d || tv.shape() != tk.shape() || nk < nq || n_heads == 0 || d % n_heads != 0 {
            return Err(Error::shape(format!(
                "attention q {:?} k {:?} v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        let mut out = Tensor::zeros(vec![nq, d]);
        let mut probs = vec![T::zero(); nq * n_heads * nk];
        let mut p = vec![T::zero(); n_heads * nk];
        for i in 0..nq {
            let n_vis = nk - nq + i + 1;
            kernels::attend_row(
                tq.row(i),
                tk.data(),
                tv.data(),
                n_vis,
                n_heads,
                out.row_mut(i),
                &mut p[..n_heads * n_vis],
            );
            for h in 0..n_heads {
                let dst = &mut probs[(i * n_heads + h) * nk..(i * n_heads + h) * nk + n_vis];
                dst.copy_from_slice(&p[h * n_vis..(h + 1) * n_vis]);
            }
        }
        Ok(self.push(out, Op::Attention { q: iq, k: ik, v: iv, n_heads, probs }, &[iq, ik, iv]))
    }

    /// Embedding lookup: row `r` of the output is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let tt = self.val(it);
        let d = tt.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= tt.rows() {
                return Err(Error::shape(format!("gather id {id} from {} rows", tt.rows())));
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(out, Op::Gather { table: it, ids: ids.to_vec() }, &[it]))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let tx = self.val(ix);
        let d = tx.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= tx.rows() {
                return Err(Error::shape(format!("select row {r} of {}", tx.rows())));
            }
            data.extend_from_slice(tx.row(r));
        }
        let out = Tensor::matrix(rows.len(), d, data)?;
        Ok(self.push(out, Op::SelectRows { x: ix, rows: rows.to_vec() }, &[ix]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.cols() != tb.cols() {
            return Err(Error::shape(format!("concat {:?} with {:?}", ta.shape(), tb.shape())));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::matrix(ta.rows() + tb.rows(), ta.cols(), data)?;
        Ok(self.push(out, Op::ConcatRows(ia, ib), &[ia, ib]))
    }

    /// `base + delta` on rows where `mask` is set; `base` unchanged elsewhere.
    pub fn masked_add(&mut self, base: Var, delta: Var, mask: &[bool]) -> Result<Var> {
        let (ib, id) = (self.idx(base)?, self.idx(delta)?);
        self.same_shape(ib, id, "masked_add")?;
        let (tb, td) = (self.val(ib), self.val(id));
        if mask.len() != tb.rows() {
            return Err(Error::shape(format!("mask of {} rows for {}", mask.len(), tb.rows())));
        }
        let mut out = tb.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for (o, &dv) in out.row_mut(r).iter_mut().zip(td.row(r)) {
                    *o += dv;
                }
            }
        }
        Ok(self.push(out, Op::MaskedAdd { base: ib, delta: id, mask: mask.to_vec() }, &[ib, id]))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let tx = self.val(ix);
        let out = Tensor::matrix(1, tx.cols(), mean_rows(tx))?;
        Ok(self.push(out, Op::MeanRows(ix), &[ix]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let total = self.val(ix).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(ix), &[ix]))
    }

    /// Class-weighted binary cross-entropy on a single logit.
    pub fn bce_with_logit(&mut self, logit: Var, label: u8, weight: T) -> Result<Var> {
        let il = self.idx(logit)?;
        if label > 1 {
            return Err(Error::InvalidLabel(label));
        }
        let z = self.val(il).item()?;
        let l = if label == 1 { T::one() } else { T::zero() };
        let loss = weight * bce_value(z, l);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { logit: il, label: l, weight }, &[il]))
    }

    /// Sum over rows of `weights[r] * -log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let il = self.idx(logits)?;
        let tl = self.val(il);
        if targets.len() != tl.rows() || weights.len() != tl.rows() {
            return Err(Error::shape(format!(
                "cross_entropy {} targets for {} rows",
                targets.len(),
                tl.rows()
            )));
        }
        let mut probs = tl.data().to_vec();
        let v = tl.cols();
        let mut loss = T::zero();
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= v {
                return Err(Error::shape(format!("target {t} outside {v} classes")));
            }
            let row = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss += w * (lse - row[t]);
            kernels::softmax_row(row);
        }
        let op = Op::CrossEntropy { logits: il, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, &[il]))
    }

    /// Reverse pass from a scalar `loss`. Every leaf recorded with
    /// `requires_grad` receives a gradient (zeros if unreachable).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        if self.val(il).len() != 1 {
            return Err(Error::shape(format!("loss has shape {:?}", self.val(il).shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);
        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        let wants = |p: usize| self.nodes[p].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(a) {
                    let ga = kernels::matmul_nt(g, tb.data(), m, n, k);
                    accumulate(grads, a, &ga);
                }
                if wants(b) {
                    let gb = slot(grads, b, tb.len());
                    kernels::matmul_tn_acc(ta.data(), g, m, k, n, gb);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if wants(a) {
                    let ga = kernels::matmul(g, tb.data(), m, n, k);
                    accumulate(grads, a, &ga);
                }
                if wants(b) {
                    let gb = slot(grads, b, tb.len());
                    kernels::matmul_tn_acc(g, ta.data(), m, n, k, gb);
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g);
                }
                if wants(b) {
                    accumulate(grads, b, g);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let gb: Vec<T> = g.iter().zip(self.val(b).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, a, &gb);
                }
                if wants(b) {
                    let ga: Vec<T> = g.iter().zip(self.val(a).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, b, &ga);
                }
            }
            &Op::Scale(a, c) => {
                let ga: Vec<T> = g.iter().map(|&x| x * c).collect();
                accumulate(grads, a, &ga);
            }
            &Op::Silu(a) => {
                let ga: Vec<T> = g
                    .iter()
                    .zip(self.val(a).data())
                    .map(|(&gv, &x)| gv * kernels::silu_grad(x))
                    .collect();
                accumulate(grads, a, &ga);
            }
            Op::RmsNorm { x, gain, inv } => {
                let (tx, tg) = (self.val(*x), self.val(*gain));
                let d = tx.cols();
                let dn = T::from_f64(d as f64);
                if wants(*x) {
                    let mut gx = vec![T::zero(); tx.len()];
                    for (r, &iv) in inv.iter().enumerate() {
                        let xr = tx.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let mut s = T::zero();
                        for j in 0..d {
                            s += tg.data()[j] * gr[j] * xr[j];
                        }
                        let c = iv * iv * iv * s / dn;
                        for j in 0..d {
                            gx[r * d + j] = iv * tg.data()[j] * gr[j] - xr[j] * c;
                        }
                    }
                    accumulate(grads, *x, &gx);
                }
                if wants(*gain) {
                    let gg = slot(grads, *gain, d);
                    for (r, &iv) in inv.iter().enumerate() {
                        let xr = tx.row(r);
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xr[j] * iv;
                        }
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut gx = vec![T::zero(); out.len()];
                for r in 0..out.rows() {
                    let p = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let s = kernels::dot(p, gr);
                    for j in 0..c {
                        gx[r * c + j] = p[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, x, &gx);
            }
            &Op::Rope { x, start, n_heads, base } => {
                let c = out.cols();
                let head_dim = c / n_heads;
                let mut gx = g.to_vec();
                for r in 0..out.rows() {
                    let (cs, sn) = kernels::rope_tables::<T>(start + r, head_dim, base);
                    kernels::rope_row(&mut gx[r * c..(r + 1) * c], n_heads, &cs, &sn, true);
                }
                accumulate(grads, x, &gx);
            }
            Op::Attention { q, k, v, n_heads, probs } => {
                self.attention_backward(g, *q, *k, *v, *n_heads, probs, grads);
            }
            Op::Gather { table, ids } => {
                let d = out.cols();
                let n = self.val(*table).len();
                let gt = slot(grads, *table, n);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let d = out.cols();
                let n = self.val(*x).len();
                let gx = slot(grads, *x, n);
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..d {
                        gx[src * d + j] += g[r * d + j];
                    }
                }
            }
            &Op::ConcatRows(a, b) => {
                let split = self.val(a).len();
                if wants(a) {
                    accumulate(grads, a, &g[..split]);
                }
                if wants(b) {
                    accumulate(grads, b, &g[split..]);
                }
            }
            Op::MaskedAdd { base, delta, mask } => {
                if wants(*base) {
                    accumulate(grads, *base, g);
                }
                if wants(*delta) {
                    let d = out.cols();
                    let gd = slot(grads, *delta, out.len());
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for j in 0..d {
                                gd[r * d + j] += g[r * d + j];
                            }
                        }
                    }
                }
            }
            &Op::MeanRows(x) => {
                let tx = self.val(x);
                let (n, d) = (tx.rows(), tx.cols());
                let inv = T::one() / T::from_f64(n as f64);
                let gx = slot(grads, x, tx.len());
                for r in 0..n {
                    for j in 0..d {
                        gx[r * d + j] += g[j] * inv;
                    }
                }
            }
            &Op::Sum(x) => {
                let n = self.val(x).len();
                let gx = slot(grads, x, n);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
            &Op::Bce { logit, label, weight } => {
                let z = self.val(logit).data()[0];
                let dz = weight * (kernels::sigmoid(z) - label) * g[0];
                accumulate(grads, logit, &[dz]);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let v = self.val(*logits).cols();
                let mut gl = vec![T::zero(); probs.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl[r * v + j] = g[0] * w * (probs[r * v + j] - onehot);
                    }
                }
                accumulate(grads, *logits, &gl);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: usize,
        k: usize,
        v: usize,
        n_heads: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (tq, tk, tv) = (self.val(q), self.val(k), self.val(v));
        let (nq, d, nk) = (tq.rows(), tq.cols(), tk.rows());
        let hd = d / n_heads;
        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        let mut gq = vec![T::zero(); tq.len()];
        let mut gk = vec![T::zero(); tk.len()];
        let mut gv = vec![T::zero(); tv.len()];
        let mut dp = vec![T::zero(); nk];
        for i in 0..nq {
            let n_vis = nk - nq + i + 1;
            for h in 0..n_heads {
                let c0 = h * hd;
                let p = &probs[(i * n_heads + h) * nk..(i * n_heads + h) * nk + n_vis];
                let go = &g[i * d + c0..i * d + c0 + hd];
                for j in 0..n_vis {
                    let vj = &tv.data()[j * d + c0..j * d + c0 + hd];
                    dp[j] = kernels::dot(go, vj);
                    for c in 0..hd {
                        gv[j * d + c0 + c] += p[j] * go[c];
                    }
                }
                let s = kernels::dot(p, &dp[..n_vis]);
                let qi = &tq.data()[i * d + c0..i * d + c0 + hd];
                for j in 0..n_vis {
                    let ds = p[j] * (dp[j] - s) * scale;
                    let kj = &tk.data()[j * d + c0..j * d + c0 + hd];
                    for c in 0..hd {
                        gq[i * d + c0 + c] += ds * kj[c];
                        gk[j * d + c0 + c] += ds * qi[c];
                    }
                }
            }
        }
        if self.nodes[q].needs_grad {
            accumulate(grads, q, &gq);
        }
        if self.nodes[k].needs_grad {
            accumulate(grads, k, &gk);
        }
        if self.nodes[v].needs_grad {
            accumulate(grads, v, &gv);
        }
    }
}

/// Column means of a row-major matrix, summing rows in order.
pub(crate) fn mean_rows<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let mut acc = vec![T::zero(); x.cols()];
    for r in 0..x.rows() {
        for (a, &v) in acc.iter_mut().zip(x.row(r)) {
            *a += v;
        }
    }
    let n = T::from_f64(x.rows() as f64);
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Numerically stable `-[l log s(z) + (1 - l) log(1 - s(z))]`.
pub fn bce_value<T: Scalar>(z: T, label: T) -> T {
    let softplus = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
    softplus - label * z
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, n: usize) -> &mut Vec<T> {
    grads[i].get_or_insert_with(|| vec![T::zero(); n])
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    match &mut grads[i] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
