//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every operation applied to its variables. Leaves that
//! are registered with a name and carry `requires_grad` become parameters;
//! [`Graph::backward`] consumes the tape and returns one gradient per such
//! parameter, keyed by name.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numeric::kernels;
use crate::numeric::{Real, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Shape parameters of a fused causal self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

enum Op<T: Real> {
    Leaf,
    MatMul { a: usize, b: usize },
    Linear { x: usize, w: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: T },
    Silu { a: usize },
    Softmax { a: usize },
    Sum { a: usize },
    RmsNorm { x: usize, w: usize, inv_rms: Vec<T> },
    Embedding { table: usize, ids: Vec<u32> },
    Rope { x: usize, cos: Vec<T>, sin: Vec<T>, seq: usize, head_dim: usize },
    Attention { q: usize, k: usize, v: usize, dims: AttnDims, probs: Vec<T> },
    CrossEntropy { logits: usize, targets: Vec<u32>, weights: Vec<T>, probs: Vec<T> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients produced by one backward pass, keyed by parameter name.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

pub struct Graph<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Multiply-accumulates executed by matmul-style ops on this tape.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    /// Named leaf; tracked for gradients when `tensor.requires_grad()` is set.
    pub fn param(&mut self, name: impl Into<String>, tensor: &Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push_node(tensor.clone(), Op::Leaf, requires_grad, Some(name.into()))
    }

    /// Untracked leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_node(tensor, Op::Leaf, false, None)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: Option<String>) -> Var {
        let value = value.with_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        let value = value.checked(op_name)?;
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_node(value, op, rg, None))
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Detached);
        }
        Ok(v.index)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ai].value.matmul(&self.nodes[bi].value)?;
        let (m, k) = self.nodes[ai].value.as_matrix("matmul")?;
        self.macs += (m * k * out.cols()) as u64;
        self.push("matmul", out, Op::MatMul { a: ai, b: bi }, &[ai, bi])
    }

    /// `x Wᵀ` with `W` shaped `[out, in]`; leading dims of `x` are rows.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let out = self.nodes[xi].value.matmul_t(&self.nodes[wi].value)?;
        let (m, k) = self.nodes[xi].value.as_rows_cols();
        self.macs += (m * k * out.cols()) as u64;
        self.push("linear", out, Op::Linear { x: xi, w: wi }, &[xi, wi])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ai].value.add(&self.nodes[bi].value)?;
        self.push("add", out, Op::Add { a: ai, b: bi }, &[ai, bi])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ai].value.mul(&self.nodes[bi].value)?;
        self.push("mul", out, Op::Mul { a: ai, b: bi }, &[ai, bi])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let factor = T::of(factor);
        let out = self.nodes[ai].value.scale(factor)?;
        self.push("scale", out, Op::Scale { a: ai, factor }, &[ai])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.map(|v| v * sigmoid(v));
        self.push("silu", out, Op::Silu { a: ai }, &[ai])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.softmax()?;
        self.push("softmax", out, Op::Softmax { a: ai }, &[ai])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = Tensor::scalar(self.nodes[ai].value.sum());
        self.push("sum", out, Op::Sum { a: ai }, &[ai])
    }

    /// Root-mean-square normalisation over the last dimension, scaled by `w`.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let xv = &self.nodes[xi].value;
        let wv = &self.nodes[wi].value;
        let cols = xv.cols();
        if wv.numel() != cols {
            return Err(Error::shape("rms_norm", format!("x {:?} with weight {:?}", xv.shape(), wv.shape())));
        }
        let eps = T::of(eps);
        let n = T::of(cols as f64);
        let mut inv_rms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(cols) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(wv.data()).map(|(&v, &g)| v * r * g));
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("rms_norm", out, Op::RmsNorm { x: xi, w: wi, inv_rms }, &[xi, wi])
    }

    /// Row gather: `table[ids[r]]` for each `r`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let ti = self.idx(table)?;
        let tv = &self.nodes[ti].value;
        let (vocab, dim) = tv.as_matrix("embedding")?;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            out.extend_from_slice(tv.row(id as usize));
        }
        let out = Tensor::new([ids.len(), dim], out)?;
        self.push("embedding", out, Op::Embedding { table: ti, ids: ids.to_vec() }, &[ti])
    }

    /// Rotary position embedding on `[batch*seq, heads*head_dim]`; position of
    /// row `r` is `r % seq`. Dimension `j` is paired with `j + head_dim/2`.
    pub fn rope(&mut self, x: Var, seq: usize, head_dim: usize, base: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let (rows, cols) = xv.as_rows_cols();
        if head_dim % 2 != 0 || cols % head_dim != 0 || rows % seq != 0 {
            return Err(Error::shape(
                "rope",
                format!("{:?} with seq {seq}, head_dim {head_dim}", xv.shape()),
            ));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for pos in 0..seq {
            for j in 0..half {
                let freq = base.powf(-2.0 * j as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        let mut out = xv.data().to_vec();
        rotate(&mut out, cols, seq, head_dim, &cos, &sin, false);
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            "rope",
            out,
            Op::Rope {
                x: xi,
                cos,
                sin,
                seq,
                head_dim,
            },
            &[xi],
        )
    }

    /// Causal multi-head attention with grouped key/value heads.
    ///
    /// `q` is `[batch*seq, heads*head_dim]`, `k` and `v` are
    /// `[batch*seq, kv_heads*head_dim]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, dims: AttnDims) -> Result<Var> {
        let (qi, ki, vi) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let AttnDims {
            batch,
            seq,
            heads,
            kv_heads,
            head_dim,
        } = dims;
        let rows = batch * seq;
        let qw = heads * head_dim;
        let kw = kv_heads * head_dim;
        let (qv, kv, vv) = (&self.nodes[qi].value, &self.nodes[ki].value, &self.nodes[vi].value);
        if kv_heads == 0
            || heads % kv_heads != 0
            || qv.as_rows_cols() != (rows, qw)
            || kv.as_rows_cols() != (rows, kw)
            || vv.as_rows_cols() != (rows, kw)
        {
            return Err(Error::shape(
                "attention",
                format!("q {:?} k {:?} v {:?} for {dims:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let group = heads / kv_heads;
        let scale = T::of(1.0 / (head_dim as f64).sqrt());
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * qw];
        for b in 0..batch {
            for h in 0..heads {
                let kh = h / group;
                for i in 0..seq {
                    let qrow = &qd[(b * seq + i) * qw + h * head_dim..][..head_dim];
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    for j in 0..=i {
                        let krow = &kd[(b * seq + j) * kw + kh * head_dim..][..head_dim];
                        p[j] = kernels::dot(qrow, krow) * scale;
                    }
                    kernels::softmax_in_place(&mut p[..=i]);
                    let orow = &mut out[(b * seq + i) * qw + h * head_dim..][..head_dim];
                    for j in 0..=i {
                        let vrow = &vd[(b * seq + j) * kw + kh * head_dim..][..head_dim];
                        kernels::axpy(p[j], vrow, orow);
                    }
                }
            }
        }
        // full score and value products, the usual profiler convention
        self.macs += (2 * batch * heads * seq * seq * head_dim) as u64;
        let out = Tensor::new([rows, qw], out)?;
        self.push(
            "attention",
            out,
            Op::Attention {
                q: qi,
                k: ki,
                v: vi,
                dims,
                probs,
            },
            &[qi, ki, vi],
        )
    }

    /// `Σ_r weights[r] · (−log softmax(logits[r])[targets[r]])`, a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[f64]) -> Result<Var> {
        let li = self.idx(logits)?;
        let lv = &self.nodes[li].value;
        let (rows, vocab) = lv.as_rows_cols();
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (r, row) in probs.chunks_mut(vocab).enumerate() {
            let t = targets[r];
            if t as usize >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            let lse = kernels::log_sum_exp(row);
            let w = T::of(weights[r]);
            if w != T::zero() {
                loss += w * (lse - row[t as usize]);
            }
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let weights = weights.iter().map(|&w| T::of(w)).collect();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            &[li],
        )
    }

    /// Consumes the tape and returns gradients of `loss` for every tracked
    /// parameter. Parameters the loss does not reach get zero gradients.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        let shape = self.nodes[li].value.shape().to_vec();
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        let mut out = Gradients::new();

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = Accum {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.name {
                        let t = Tensor::new(node.value.shape().to_vec(), g)?;
                        merge_grad(&mut out, name, t)?;
                    }
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k) = av.as_rows_cols();
                    let n = bv.cols();
                    if acc.wants(*a) {
                        acc.add(*a, kernels::matmul_nt(&g, bv.data(), m, n, k));
                    }
                    if acc.wants(*b) {
                        acc.add(*b, kernels::matmul_tn(av.data(), &g, m, k, n));
                    }
                }
                Op::Linear { x, w } => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (m, k) = xv.as_rows_cols();
                    let n = wv.shape()[0];
                    if acc.wants(*x) {
                        acc.add(*x, kernels::matmul_nn(&g, wv.data(), m, n, k));
                    }
                    if acc.wants(*w) {
                        acc.add(*w, kernels::matmul_tn(&g, xv.data(), m, n, k));
                    }
                }
                Op::Add { a, b } => {
                    if acc.wants(*b) {
                        acc.add(*b, g.clone());
                    }
                    acc.add(*a, g);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    if acc.wants(*a) {
                        acc.add(*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                    }
                    if acc.wants(*b) {
                        acc.add(*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
                    }
                }
                Op::Scale { a, factor } => {
                    acc.add(*a, g.iter().map(|&g| g * *factor).collect());
                }
                Op::Silu { a } => {
                    let av = self.nodes[*a].value.data();
                    let d = g
                        .iter()
                        .zip(av)
                        .map(|(&g, &x)| {
                            let s = sigmoid(x);
                            g * s * (T::one() + x * (T::one() - s))
                        })
                        .collect();
                    acc.add(*a, d);
                }
                Op::Softmax { a } => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut d = vec![T::zero(); g.len()];
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols)) {
                        let s = kernels::dot(gr, yr);
                        for c in 0..cols {
                            dr[c] = yr[c] * (gr[c] - s);
                        }
                    }
                    acc.add(*a, d);
                }
                Op::Sum { a } => {
                    let n = self.nodes[*a].value.numel();
                    acc.add(*a, vec![g[0]; n]);
                }
                Op::RmsNorm { x, w, inv_rms } => {
                    let (xv, wv) = (&self.nodes[*x].value, self.nodes[*w].value.data());
                    let cols = xv.cols();
                    let n = T::of(cols as f64);
                    let want_x = acc.wants(*x);
                    let mut dx = if want_x { vec![T::zero(); g.len()] } else { Vec::new() };
                    let mut dw = vec![T::zero(); cols];
                    for (r, (xr, gr)) in xv.data().chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let rr = inv_rms[r];
                        let mut proj = T::zero();
                        for c in 0..cols {
                            let xhat = xr[c] * rr;
                            dw[c] += gr[c] * xhat;
                            proj += gr[c] * wv[c] * xhat;
                        }
                        if want_x {
                            let mean = proj / n;
                            let dr = &mut dx[r * cols..(r + 1) * cols];
                            for c in 0..cols {
                                dr[c] = rr * (gr[c] * wv[c] - xr[c] * rr * mean);
                            }
                        }
                    }
                    if want_x {
                        acc.add(*x, dx);
                    }
                    acc.add(*w, dw);
                }
                Op::Embedding { table, ids } => {
                    let tv = &self.nodes[*table].value;
                    let dim = tv.cols();
                    let mut d = vec![T::zero(); tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        for c in 0..dim {
                            d[id * dim + c] += g[r * dim + c];
                        }
                    }
                    acc.add(*table, d);
                }
                Op::Rope {
                    x,
                    cos,
                    sin,
                    seq,
                    head_dim,
                } => {
                    let cols = node.value.cols();
                    let mut d = g;
                    rotate(&mut d, cols, *seq, *head_dim, cos, sin, true);
                    acc.add(*x, d);
                }
                Op::Attention { q, k, v, dims, probs } => {
                    let (dq, dk, dv) = attention_backward(
                        &g,
                        self.nodes[*q].value.data(),
                        self.nodes[*k].value.data(),
                        self.nodes[*v].value.data(),
                        probs,
                        *dims,
                    );
                    acc.add(*q, dq);
                    acc.add(*k, dk);
                    acc.add(*v, dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let vocab = self.nodes[*logits].value.cols();
                    let mut d = probs.clone();
                    for (r, row) in d.chunks_mut(vocab).enumerate() {
                        let w = weights[r] * g[0];
                        row[targets[r] as usize] -= T::one();
                        for v in row.iter_mut() {
                            *v = *v * w;
                        }
                    }
                    acc.add(*logits, d);
                }
            }
        }

        // parameters registered but unreachable from the loss
        for node in &self.nodes {
            if let (Op::Leaf, true, Some(name)) = (&node.op, node.requires_grad, &node.name) {
                out.entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        for (name, t) in &out {
            if !t.is_finite() {
                log::error!("non-finite gradient for {name}");
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(out)
    }
}

struct Accum<'a, T: Real> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Real> Accum<'_, T> {
    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn add(&mut self, i: usize, g: Vec<T>) {
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut self.grads[i] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn merge_grad<T: Real>(out: &mut Gradients<T>, name: &str, t: Tensor<T>) -> Result<()> {
    match out.get_mut(name) {
        Some(existing) => {
            existing.expect_same_shape(&t, "backward")?;
            for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += *v;
            }
        }
        None => {
            out.insert(name.to_string(), t);
        }
    }
    Ok(())
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn rotate<T: Real>(data: &mut [T], cols: usize, seq: usize, head_dim: usize, cos: &[T], sin: &[T], inverse: bool) {
    let half = head_dim / 2;
    for (r, row) in data.chunks_mut(cols).enumerate() {
        let pos = r % seq;
        let (c, s) = (&cos[pos * half..][..half], &sin[pos * half..][..half]);
        for head in row.chunks_mut(head_dim) {
            for j in 0..half {
                let (a, b) = (head[j], head[j + half]);
                let sn = if inverse { -s[j] } else { s[j] };
                head[j] = a * c[j] - b * sn;
                head[j + half] = a * sn + b * c[j];
            }
        }
    }
}

fn attention_backward<T: Real>(
    g: &[T],
    qd: &[T],
    kd: &[T],
    vd: &[T],
    probs: &[T],
    dims: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims {
        batch,
        seq,
        heads,
        kv_heads,
        head_dim,
    } = dims;
    let qw = heads * head_dim;
    let kw = kv_heads * head_dim;
    let group = heads / kv_heads;
    let scale = T::of(1.0 / (head_dim as f64).sqrt());
    let mut dq = vec![T::zero(); qd.len()];
    let mut dk = vec![T::zero(); kd.len()];
    let mut dv = vec![T::zero(); vd.len()];
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let kh = h / group;
            for i in 0..seq {
                let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                let go = &g[(b * seq + i) * qw + h * head_dim..][..head_dim];
                let mut inner = T::zero();
                for j in 0..=i {
                    let voff = (b * seq + j) * kw + kh * head_dim;
                    kernels::axpy(p[j], go, &mut dv[voff..voff + head_dim]);
                    dp[j] = kernels::dot(go, &vd[voff..voff + head_dim]);
                    inner += p[j] * dp[j];
                }
                let qoff = (b * seq + i) * qw + h * head_dim;
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let koff = (b * seq + j) * kw + kh * head_dim;
                    kernels::axpy(ds, &kd[koff..koff + head_dim], &mut dq[qoff..qoff + head_dim]);
                    kernels::axpy(ds, &qd[qoff..qoff + head_dim], &mut dk[koff..koff + head_dim]);
                }
            }
        }
    }
    (dq, dk, dv)
}
