//! Arena-style reverse-mode tape.
//!
//! Values are recorded in creation order, so a reverse sweep over node
//! indices is a valid topological order. Parameters are bound fresh for each
//! optimizer step with [`Tape::param`], and their gradients are read back
//! from [`Gradients`].

use super::kernels;
use super::loss::log_softmax_row;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    BmmNt { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    SubRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    Scale(Var, S),
    Tanh(Var),
    Gelu(Var),
    GeluGrad(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Mask { a: Var, mask: Vec<S> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    Dyt { x: Var, alpha: Var, gamma: Var, beta: Var },
    DytGrad { x: Var, alpha: Vec<S>, gamma: Vec<S> },
    Attention { q: Var, k: Var, v: Var, seqs: usize, t: usize, heads: usize, probs: Vec<S> },
    GatherRows { a: Var, idx: Vec<usize> },
    SliceRows { a: Var, end: usize, grad_from: usize },
    SliceCols { a: Var, end: usize, grad_from: usize },
    Transpose(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let (m, k) = self.value(a).dims2()?;
        let n = out.shape()[1];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let (m, k) = self.value(a).dims2()?;
        let n = out.shape()[1];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNt { a, b, m, k, n }, rg))
    }

    /// Batched `a[B×m×k] · b[B×n×k]ᵀ → [B×m×n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (batch, m, k, n) = match (sa, sb) {
            ([b1, m, k], [b2, n, k2]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(Error::shape("bmm_nt", sa, sb)),
        };
        let mut out = vec![S::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            kernels::matmul_nt(
                &da[bi * m * k..(bi + 1) * m * k],
                &db[bi * n * k..(bi + 1) * n * k],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(value, Op::BmmNt { a, b, batch, m, k, n }, rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&self, a: Var, row: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.last_dim();
        if tr.rank() != 1 || tr.numel() != c {
            return Err(Error::shape(op, ta.shape(), tr.shape()));
        }
        let r = tr.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, r[i % c]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Adds a vector to every row (bias broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "add_row", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow { a, row }, rg))
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "sub_row", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::SubRow { a, row }, rg))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "mul_row", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::MulRow { a, row }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("unary keeps shape");
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, S::tanh, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    /// Elementwise GELU derivative, itself differentiable.
    pub fn gelu_grad(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu_grad, Op::GeluGrad(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(S::zero()), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, S::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Multiplies by a constant mask (e.g. a TopK selection).
    pub fn mask(&mut self, a: Var, mask: Vec<S>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.numel() {
            return Err(Error::shape("mask", ta.shape(), &[mask.len()]));
        }
        let data = ta.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Mask { a, mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: S = t.data().iter().copied().sum::<S>() / S::of(t.numel() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean next-token cross-entropy of `logits [n×v]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = t.dims2()?;
        if n != targets.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        if n == 0 {
            return Err(Error::Empty("cross_entropy targets"));
        }
        let mut probs = vec![S::zero(); n * v];
        let mut total = S::zero();
        for (i, &tg) in targets.iter().enumerate() {
            if tg >= v {
                return Err(Error::OutOfRange {
                    what: "target token",
                    index: tg,
                    limit: v,
                });
            }
            let p = &mut probs[i * v..(i + 1) * v];
            log_softmax_row(t.row(i), p);
            total -= p[tg];
            for x in p.iter_mut() {
                *x = x.exp();
            }
        }
        let loss = Tensor::scalar(total / S::of(n as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `tanh(αx)⊙γ + β` over the last dimension.
    pub fn dyt(&mut self, x: Var, alpha: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        for p in [alpha, gamma, beta] {
            if self.value(p).numel() != d {
                return Err(Error::shape("dyt", tx.shape(), self.value(p).shape()));
            }
        }
        let (a, g, b) = (self.value(alpha).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![S::zero(); tx.numel()];
        for (xr, or) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
            kernels::dyt_row(xr, a, g, b, or);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = [x, alpha, gamma, beta].iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Dyt { x, alpha, gamma, beta }, rg))
    }

    /// Diagonal DyT derivative `αγ(1 − tanh²(αx))` with constant α, γ;
    /// differentiable in `x`.
    pub fn dyt_grad(&mut self, x: Var, alpha: &[S], gamma: &[S]) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if alpha.len() != d || gamma.len() != d {
            return Err(Error::shape("dyt_grad", tx.shape(), &[alpha.len()]));
        }
        let mut out = vec![S::zero(); tx.numel()];
        for (xr, or) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
            kernels::dyt_grad_row(xr, alpha, gamma, or);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::DytGrad {
                x,
                alpha: alpha.to_vec(),
                gamma: gamma.to_vec(),
            },
            rg,
        ))
    }

    /// Causal multi-head self-attention over `seqs` sequences of length `t`;
    /// `q`, `k`, `v` are `[seqs·t × d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seqs: usize, t: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = tq.dims2()?;
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(Error::shape("attention", tq.shape(), tk.shape()));
        }
        if rows != seqs * t || heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "attention over {rows} rows with seqs={seqs}, t={t}, heads={heads}, d={d}"
            )));
        }
        let mut out = vec![S::zero(); rows * d];
        let mut probs = vec![S::zero(); seqs * heads * t * t];
        for s in 0..seqs {
            let r = s * t * d..(s + 1) * t * d;
            kernels::causal_attention(
                &tq.data()[r.clone()],
                &tk.data()[r.clone()],
                &tv.data()[r.clone()],
                t,
                d,
                heads,
                &mut out[r],
                &mut probs[s * heads * t * t..(s + 1) * heads * t * t],
            );
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                seqs,
                t,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Selects rows of a 2-D tensor; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::OutOfRange {
                    what: "gather_rows",
                    index: i,
                    limit: r,
                });
            }
            out.extend_from_slice(ta.row(i));
        }
        let value = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// First `end` rows; only rows `grad_from..end` receive gradient.
    pub fn slice_rows(&mut self, a: Var, end: usize, grad_from: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        if end > r || grad_from > end {
            return Err(Error::OutOfRange {
                what: "slice_rows",
                index: end,
                limit: r,
            });
        }
        let value = Tensor::new(vec![end, c], ta.data()[..end * c].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows { a, end, grad_from }, rg))
    }

    /// First `end` columns; only columns `grad_from..end` receive gradient.
    pub fn slice_cols(&mut self, a: Var, end: usize, grad_from: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        if end > c || grad_from > end {
            return Err(Error::OutOfRange {
                what: "slice_cols",
                index: end,
                limit: c,
            });
        }
        let mut out = Vec::with_capacity(r * end);
        for row in ta.rows() {
            out.extend_from_slice(&row[..end]);
        }
        let value = Tensor::new(vec![r, end], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols { a, end, grad_from }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(&node.op, &node.value, g.data(), &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient buffer of `v`, created on first use; `None` for constants.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<S>>], v: Var) -> Option<&'g mut [S]> {
        if !self.rg(v) {
            return None;
        }
        let shape = self.value(v).shape();
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
                .data_mut(),
        )
    }

    fn backprop(&self, op: &Op<S>, out: &Tensor<S>, g: &[S], grads: &mut [Option<Tensor<S>>]) {
        let val = |v: Var| self.value(v).data();
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    kernels::matmul_nt(g, val(b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, b) {
                    kernels::matmul_tn(val(a), g, gb, m, k, n);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    kernels::matmul(g, val(b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, b) {
                    kernels::matmul_tn(g, val(a), gb, m, n, k);
                }
            }
            &Op::BmmNt { a, b, batch, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    for bi in 0..batch {
                        kernels::matmul(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &val(b)[bi * n * k..(bi + 1) * n * k],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for bi in 0..batch {
                        kernels::matmul_tn(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &val(a)[bi * m * k..(bi + 1) * m * k],
                            &mut gb[bi * n * k..(bi + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    kernels::axpy(S::one(), g, ga);
                }
                if let Some(gb) = self.slot(grads, b) {
                    kernels::axpy(S::one(), g, gb);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    kernels::axpy(S::one(), g, ga);
                }
                if let Some(gb) = self.slot(grads, b) {
                    kernels::axpy(-S::one(), g, gb);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((x, &gi), &bi) in ga.iter_mut().zip(g).zip(val(b)) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((x, &gi), &ai) in gb.iter_mut().zip(g).zip(val(a)) {
                        *x += gi * ai;
                    }
                }
            }
            &Op::AddRow { a, row } | &Op::SubRow { a, row } => {
                let sign = if matches!(op, Op::SubRow { .. }) { -S::one() } else { S::one() };
                if let Some(ga) = self.slot(grads, a) {
                    kernels::axpy(S::one(), g, ga);
                }
                if let Some(gr) = self.slot(grads, row) {
                    let c = gr.len();
                    for gi in g.chunks(c) {
                        kernels::axpy(sign, gi, gr);
                    }
                }
            }
            &Op::MulRow { a, row } => {
                let c = self.value(row).numel();
                if let Some(ga) = self.slot(grads, a) {
                    let r = val(row);
                    for (gar, gi) in ga.chunks_mut(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            gar[j] += gi[j] * r[j];
                        }
                    }
                }
                if let Some(gr) = self.slot(grads, row) {
                    for (ar, gi) in val(a).chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            gr[j] += gi[j] * ar[j];
                        }
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, a) {
                    kernels::axpy(c, g, ga);
                }
            }
            &Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += gi * (S::one() - y * y);
                    }
                }
            }
            &Op::Gelu(a) => self.pointwise(grads, a, g, kernels::gelu_grad),
            &Op::GeluGrad(a) => self.pointwise(grads, a, g, kernels::gelu_grad2),
            &Op::Relu(a) => self.pointwise(grads, a, g, |x| if x > S::zero() { S::one() } else { S::zero() }),
            &Op::Abs(a) => self.pointwise(grads, a, g, |x| {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            }),
            &Op::Square(a) => self.pointwise(grads, a, g, |x| S::of(2.0) * x),
            Op::Mask { a, mask } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &gi), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += gi * m;
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let s = g[0] / S::of(ga.len() as f64);
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    let n = targets.len();
                    let v = probs.len() / n;
                    let s = g[0] / S::of(n as f64);
                    for (i, &tg) in targets.iter().enumerate() {
                        for j in 0..v {
                            let mut d = probs[i * v + j];
                            if j == tg {
                                d -= S::one();
                            }
                            gl[i * v + j] += s * d;
                        }
                    }
                }
            }
            &Op::Dyt { x, alpha, gamma, beta } => {
                let d = self.value(alpha).numel();
                let (xs, a, gm) = (val(x), val(alpha), val(gamma));
                if let Some(gx) = self.slot(grads, x) {
                    for (r, (gxr, gr)) in gx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        for j in 0..d {
                            let t = (a[j] * xs[r * d + j]).tanh();
                            gxr[j] += gr[j] * a[j] * gm[j] * (S::one() - t * t);
                        }
                    }
                }
                if let Some(ga) = self.slot(grads, alpha) {
                    for (xr, gr) in xs.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            let t = (a[j] * xr[j]).tanh();
                            ga[j] += gr[j] * gm[j] * (S::one() - t * t) * xr[j];
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, gamma) {
                    for (xr, gr) in xs.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * (a[j] * xr[j]).tanh();
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, beta) {
                    for gr in g.chunks(d) {
                        kernels::axpy(S::one(), gr, gb);
                    }
                }
            }
            Op::DytGrad { x, alpha, gamma } => {
                let d = alpha.len();
                let xs = val(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, (gxr, gr)) in gx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        for j in 0..d {
                            let t = (alpha[j] * xs[r * d + j]).tanh();
                            let dd = -S::of(2.0) * alpha[j] * alpha[j] * gamma[j] * t * (S::one() - t * t);
                            gxr[j] += gr[j] * dd;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, seqs, t, heads, probs } => {
                self.attention_backward(grads, g, (*q, *k, *v), *seqs, *t, *heads, probs);
            }
            Op::GatherRows { a, idx } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let c = self.value(*a).last_dim();
                    for (r, &i) in idx.iter().enumerate() {
                        kernels::axpy(S::one(), &g[r * c..(r + 1) * c], &mut ga[i * c..(i + 1) * c]);
                    }
                }
            }
            &Op::SliceRows { a, end, grad_from } => {
                if let Some(ga) = self.slot(grads, a) {
                    let c = self.value(a).last_dim();
                    kernels::axpy(S::one(), &g[grad_from * c..end * c], &mut ga[grad_from * c..end * c]);
                }
            }
            &Op::SliceCols { a, end, grad_from } => {
                if let Some(ga) = self.slot(grads, a) {
                    let c = self.value(a).last_dim();
                    for (gar, gr) in ga.chunks_mut(c).zip(g.chunks(end)) {
                        kernels::axpy(S::one(), &gr[grad_from..end], &mut gar[grad_from..end]);
                    }
                }
            }
            &Op::Transpose(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    kernels::axpy(S::one(), g, ga);
                }
            }
        }
    }

    fn pointwise(&self, grads: &mut [Option<Tensor<S>>], a: Var, g: &[S], d: impl Fn(S) -> S) {
        let xs = self.value(a).data();
        if let Some(ga) = self.slot(grads, a) {
            for ((x, &gi), &xi) in ga.iter_mut().zip(g).zip(xs) {
                *x += gi * d(xi);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Tensor<S>>],
        g: &[S],
        (q, k, v): (Var, Var, Var),
        seqs: usize,
        t: usize,
        heads: usize,
        probs: &[S],
    ) {
        let d = self.value(q).last_dim();
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let rows = seqs * t;
        let mut gq = vec![S::zero(); rows * d];
        let mut gk = vec![S::zero(); rows * d];
        let mut gv = vec![S::zero(); rows * d];
        let mut dp = vec![S::zero(); t];
        for s in 0..seqs {
            let base = s * t;
            for h in 0..heads {
                let off = h * dh;
                let pblock = &probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
                for i in 0..t {
                    let prow = &pblock[i * t..(i + 1) * t];
                    let gi = &g[(base + i) * d + off..(base + i) * d + off + dh];
                    let mut dot_pp = S::zero();
                    for j in 0..=i {
                        dp[j] = kernels::dot(gi, &vs[(base + j) * d + off..(base + j) * d + off + dh]);
                        dot_pp += dp[j] * prow[j];
                        kernels::axpy(prow[j], gi, &mut gv[(base + j) * d + off..(base + j) * d + off + dh]);
                    }
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - dot_pp) * scale;
                        if ds == S::zero() {
                            continue;
                        }
                        let (qi, kj) = ((base + i) * d + off, (base + j) * d + off);
                        kernels::axpy(ds, &ks[kj..kj + dh], &mut gq[qi..qi + dh]);
                        kernels::axpy(ds, &qs[qi..qi + dh], &mut gk[kj..kj + dh]);
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(slot) = self.slot(grads, var) {
                kernels::axpy(S::one(), &buf, slot);
            }
        }
    }
}
