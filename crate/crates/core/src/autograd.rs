//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes a node
//! holding its output value and enough saved state to run its backward rule,
//! so insertion order is already a topological order and [`Graph::backward`]
//! is a single reverse sweep.
//!
//! Leaves created with [`Graph::param`] own a persistent gradient buffer.
//! Backward adds into it, so two backward passes without
//! [`Graph::zero_grad`] leave exactly twice the gradient.

use crate::error::{Result, XftError};
use crate::tensor::{matmul_dims, matmul_nn, matmul_nt, matmul_tn, softmax_in_place, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom`]: receives the output gradient, the
/// input values and the output value, and returns one optional gradient per
/// input (same length as that input's data).
pub type BackwardRule<T> = Box<dyn Fn(&[T], &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleByElem(Var, Var, usize),
    MulCol(Var, Var, usize),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<T> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    Sum(Var),
    Custom { inputs: Vec<Var>, rule: BackwardRule<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Persistent gradient, only for tracked leaves.
    grad: Option<Vec<T>>,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`; vars pointing past
    /// the new end become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Gradient-tracked leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Untracked leaf; backward never computes anything for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![T::zero(); value.len()]);
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf; `None` for untracked leaves and
    /// intermediate nodes.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches value shape")
        })
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[1] {
            return Err(XftError::Shape(format!(
                "matmul_nt: cannot multiply {:?} by transpose of {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
        let mut out = vec![T::zero(); m * n];
        matmul_nt(va.data(), vb.data(), m, k, n, &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(XftError::Shape(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`C` vector to every row of an `[R×C]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        let (_, cols) = va.dims2();
        if vb.len() != cols {
            return Err(XftError::Shape(format!(
                "add_row: bias {:?} does not match rows of {:?}",
                vb.shape(),
                va.shape()
            )));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, &b) in row.iter_mut().zip(vb.data()) {
                *x = *x + b;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(XftError::Shape(format!("mul: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// `a * s[idx]`, with the scale taken from a (possibly tracked) tensor.
    pub fn scale_by_elem(&mut self, a: Var, s: Var, idx: usize) -> Result<Var> {
        let sv = self.value(s);
        if idx >= sv.len() {
            return Err(XftError::Shape(format!("scale_by_elem: index {idx} out of {:?}", sv.shape())));
        }
        let c = sv.data()[idx];
        let out = self.value(a).scale(c);
        Ok(self.push(out, Op::ScaleByElem(a, s, idx), &[a, s]))
    }

    /// Row `r` of `x: [R×C]` multiplied by `gates[r, col]`, `gates: [R×N]`.
    pub fn mul_col(&mut self, x: Var, gates: Var, col: usize) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gates));
        let (rows, cols) = vx.dims2();
        let (grows, gcols) = vg.dims2();
        if rows != grows || col >= gcols {
            return Err(XftError::Shape(format!(
                "mul_col: {:?} with column {col} of {:?}",
                vx.shape(),
                vg.shape()
            )));
        }
        let mut data = vx.data().to_vec();
        for (r, row) in data.chunks_mut(cols).enumerate() {
            let w = vg.data()[r * gcols + col];
            row.iter_mut().for_each(|x| *x = *x * w);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulCol(x, gates, col), &[x, gates]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.dims2();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(XftError::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} vs input {:?}",
                self.shape_of(gamma),
                self.shape_of(beta),
                vx.shape()
            )));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); rows * cols];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().map(|x| x.as_f64()).sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..cols {
                let xhat = T::of((row[c].as_f64() - mean) * rs);
                out[r * cols + c] = xhat * g[c] + b[c];
            }
            rstd.push(T::of(rs));
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, rstd }, &[x, gamma, beta]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax()?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Multi-head causal self-attention core: `softmax(q kᵀ / √d_h + mask) v`
    /// per head, heads laid out as contiguous column blocks.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.shape() != vk.shape() || vq.shape() != vv.shape() || vq.rank() != 2 {
            return Err(XftError::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                vq.shape(),
                vk.shape(),
                vv.shape()
            )));
        }
        let (t, d) = (vq.shape()[0], vq.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(XftError::Shape(format!("attention: {heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut probs = vec![T::zero(); heads * t * t];
        let mut out = vec![T::zero(); t * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let p = &mut probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                for (j, pj) in p.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for c in 0..dh {
                        acc = acc + qd[i * d + off + c] * kd[j * d + off + c];
                    }
                    *pj = acc * scale;
                }
                softmax_in_place(p);
                let o = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    for c in 0..dh {
                        o[c] = o[c] + pj * vd[j * d + off + c];
                    }
                }
            }
        }
        let out = Tensor::new(vec![t, d], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(XftError::Shape(format!("embedding table must be 2-D, got {:?}", vt.shape())));
        }
        let (rows, cols) = (vt.shape()[0], vt.shape()[1]);
        if ids.is_empty() {
            return Err(XftError::Shape("embedding: empty index list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(XftError::Shape(format!("embedding: index {id} out of range for {rows} rows")));
            }
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// `Σ_r weights[r] · (logsumexp(logits[r]) − logits[r, targets[r]])`, a scalar.
    /// Rows with zero weight contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, cols) = vl.dims2();
        if targets.len() != rows || weights.len() != rows {
            return Err(XftError::Shape(format!(
                "cross_entropy: logits {:?}, {} targets, {} weights",
                vl.shape(),
                targets.len(),
                weights.len()
            )));
        }
        if !vl.is_finite() {
            return Err(XftError::Numeric("cross_entropy: non-finite logits".into()));
        }
        let mut probs = vl.data().to_vec();
        let mut loss = 0.0f64;
        for r in 0..rows {
            if weights[r] == T::zero() {
                continue;
            }
            if targets[r] >= cols {
                return Err(XftError::Shape(format!("cross_entropy: target {} >= {cols}", targets[r])));
            }
            let row = vl.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
            let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
            loss += weights[r].as_f64() * (lse - row[targets[r]].as_f64());
            softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::scalar(T::of(loss));
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        Ok(self.push(out, op, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x.as_f64()).sum::<f64>();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(a), &[a])
    }

    /// Records an operation computed outside the graph, with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, rule: BackwardRule<T>) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), rule }, inputs)
    }

    /// Reverse sweep from a scalar root. Tracked leaves accumulate
    /// `∂root/∂leaf`; an untracked root leaves every gradient untouched.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(XftError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let tracked = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k, n) = matmul_dims(val(*a), val(*b))?;
                    if tracked(*a) {
                        let buf = slot(&mut grads, *a, m * k);
                        matmul_nt(&g, val(*b).data(), m, n, k, buf);
                    }
                    if tracked(*b) {
                        let buf = slot(&mut grads, *b, k * n);
                        matmul_tn(val(*a).data(), &g, m, k, n, buf);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let n = val(*b).shape()[0];
                    if tracked(*a) {
                        let buf = slot(&mut grads, *a, m * k);
                        matmul_nn(&g, val(*b).data(), m, n, k, buf);
                    }
                    if tracked(*b) {
                        let buf = slot(&mut grads, *b, n * k);
                        matmul_tn(&g, val(*a).data(), m, n, k, buf);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if tracked(v) {
                            add_into(slot(&mut grads, v, g.len()), &g);
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    if tracked(*a) {
                        add_into(slot(&mut grads, *a, g.len()), &g);
                    }
                    if tracked(*bias) {
                        let cols = val(*bias).len();
                        let buf = slot(&mut grads, *bias, cols);
                        for row in g.chunks(cols) {
                            add_into(buf, row);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    if tracked(*a) {
                        let buf = slot(&mut grads, *a, g.len());
                        for ((d, &gi), &y) in buf.iter_mut().zip(&g).zip(vb) {
                            *d = *d + gi * y;
                        }
                    }
                    if tracked(*b) {
                        let buf = slot(&mut grads, *b, g.len());
                        for ((d, &gi), &x) in buf.iter_mut().zip(&g).zip(va) {
                            *d = *d + gi * x;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if tracked(*a) {
                        let buf = slot(&mut grads, *a, g.len());
                        for (d, &gi) in buf.iter_mut().zip(&g) {
                            *d = *d + gi * *c;
                        }
                    }
                }
                Op::ScaleByElem(a, s, idx) => {
                    let c = val(*s).data()[*idx];
                    if tracked(*a) {
                        let buf = slot(&mut grads, *a, g.len());
                        for (d, &gi) in buf.iter_mut().zip(&g) {
                            *d = *d + gi * c;
                        }
                    }
                    if tracked(*s) {
                        let dot = g
                            .iter()
                            .zip(val(*a).data())
                            .map(|(&gi, &x)| gi.as_f64() * x.as_f64())
                            .sum::<f64>();
                        let len = val(*s).len();
                        let buf = slot(&mut grads, *s, len);
                        buf[*idx] = buf[*idx] + T::of(dot);
                    }
                }
                Op::MulCol(x, gates, col) => {
                    let (_, cols) = val(*x).dims2();
                    let (_, gcols) = val(*gates).dims2();
                    let gv = val(*gates).data();
                    if tracked(*x) {
                        let buf = slot(&mut grads, *x, g.len());
                        for (r, (drow, grow)) in buf.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                            let w = gv[r * gcols + col];
                            for (d, &gi) in drow.iter_mut().zip(grow) {
                                *d = *d + gi * w;
                            }
                        }
                    }
                    if tracked(*gates) {
                        let xv = val(*x).data();
                        let buf = slot(&mut grads, *gates, gv.len());
                        for (r, grow) in g.chunks(cols).enumerate() {
                            let xrow = &xv[r * cols..(r + 1) * cols];
                            let dot: T = grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum();
                            buf[r * gcols + col] = buf[r * gcols + col] + dot;
                        }
                    }
                }
                Op::Gelu(a) => {
                    if tracked(*a) {
                        let xv = val(*a).data();
                        let buf = slot(&mut grads, *a, g.len());
                        for ((d, &gi), &x) in buf.iter_mut().zip(&g).zip(xv) {
                            *d = *d + gi * gelu_grad(x);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, rstd } => {
                    let vx = val(*x);
                    let (rows, cols) = vx.dims2();
                    let gam = val(*gamma).data();
                    let mut xhat = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let row = vx.row(r);
                        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            xhat[r * cols + c] = T::of((row[c].as_f64() - mean) * rstd[r].as_f64());
                        }
                    }
                    if tracked(*gamma) {
                        let buf = slot(&mut grads, *gamma, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[c] = buf[c] + g[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                    }
                    if tracked(*beta) {
                        let buf = slot(&mut grads, *beta, cols);
                        for row in g.chunks(cols) {
                            add_into(buf, row);
                        }
                    }
                    if tracked(*x) {
                        let buf = slot(&mut grads, *x, rows * cols);
                        for r in 0..rows {
                            let mut mean_d = 0.0f64;
                            let mut mean_dx = 0.0f64;
                            for c in 0..cols {
                                let dxh = (g[r * cols + c] * gam[c]).as_f64();
                                mean_d += dxh;
                                mean_dx += dxh * xhat[r * cols + c].as_f64();
                            }
                            mean_d /= cols as f64;
                            mean_dx /= cols as f64;
                            let rs = rstd[r].as_f64();
                            for c in 0..cols {
                                let dxh = (g[r * cols + c] * gam[c]).as_f64();
                                let d = rs * (dxh - mean_d - xhat[r * cols + c].as_f64() * mean_dx);
                                buf[r * cols + c] = buf[r * cols + c] + T::of(d);
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    if tracked(*a) {
                        let y = &node.value;
                        let (rows, cols) = y.dims2();
                        let buf = slot(&mut grads, *a, rows * cols);
                        for r in 0..rows {
                            let yr = y.row(r);
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot = yr.iter().zip(gr).map(|(&p, &d)| p.as_f64() * d.as_f64()).sum::<f64>();
                            for c in 0..cols {
                                let d = yr[c].as_f64() * (gr[c].as_f64() - dot);
                                buf[r * cols + c] = buf[r * cols + c] + T::of(d);
                            }
                        }
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (t, d) = (val(*q).shape()[0], val(*q).shape()[1]);
                    let dh = d / heads;
                    let scale = T::of(1.0 / (dh as f64).sqrt());
                    let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                    let mut dq = vec![T::zero(); t * d];
                    let mut dk = vec![T::zero(); t * d];
                    let mut dv = vec![T::zero(); t * d];
                    let mut dp = vec![T::zero(); t];
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..t {
                            let p = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                            let go = &g[i * d + off..i * d + off + dh];
                            let mut dot = T::zero();
                            for j in 0..=i {
                                let mut acc = T::zero();
                                for c in 0..dh {
                                    acc = acc + go[c] * vd[j * d + off + c];
                                    dv[j * d + off + c] = dv[j * d + off + c] + p[j] * go[c];
                                }
                                dp[j] = acc;
                                dot = dot + acc * p[j];
                            }
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                for c in 0..dh {
                                    dq[i * d + off + c] = dq[i * d + off + c] + ds * kd[j * d + off + c];
                                    dk[j * d + off + c] = dk[j * d + off + c] + ds * qd[i * d + off + c];
                                }
                            }
                        }
                    }
                    for (var, local) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if tracked(var) {
                            add_into(slot(&mut grads, var, t * d), &local);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    if tracked(*table) {
                        let (rows, cols) = (val(*table).shape()[0], val(*table).shape()[1]);
                        let buf = slot(&mut grads, *table, rows * cols);
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut buf[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, weights, probs } => {
                    if tracked(*logits) {
                        let (rows, cols) = val(*logits).dims2();
                        let buf = slot(&mut grads, *logits, rows * cols);
                        for r in 0..rows {
                            let w = weights[r] * g[0];
                            if w == T::zero() {
                                continue;
                            }
                            for c in 0..cols {
                                let onehot = if c == targets[r] { T::one() } else { T::zero() };
                                buf[r * cols + c] = buf[r * cols + c] + w * (probs[r * cols + c] - onehot);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if tracked(*a) {
                        let len = val(*a).len();
                        let buf = slot(&mut grads, *a, len);
                        buf.iter_mut().for_each(|d| *d = *d + g[0]);
                    }
                }
                Op::Custom { inputs, rule } => {
                    let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                    let local = rule(&g, &values, &node.value);
                    for (&var, lg) in inputs.iter().zip(local) {
                        if let Some(lg) = lg {
                            if tracked(var) {
                                add_into(slot(&mut grads, var, lg.len()), &lg);
                            }
                        }
                    }
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(buf) = self.nodes[i].grad.as_mut() {
                    add_into(buf, &g);
                }
            }
        }
        Ok(())
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

pub fn gelu<T: Scalar>(x: T) -> T {
    let x64 = x.as_f64();
    let inner = GELU_C * (x64 + 0.044715 * x64 * x64 * x64);
    T::of(0.5 * x64 * (1.0 + inner.tanh()))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let x = x.as_f64();
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    T::of(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_root_leaves_zero_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(2.0));
        let y = g.mul(c, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(XftError::Contract(_))));
    }

    #[test]
    fn second_backward_doubles() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::vector(vec![0.3, -1.7, 2.5]));
        let y = g.gelu(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap();
        g.backward(s).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        g.zero_grad();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::from_rows(&[&[0.0, 0.0]]));
        let l = g.cross_entropy(logits, &[1], &[1.0]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let uniform = g.constant(Tensor::zeros(&[3, 259]));
        let l = g.cross_entropy(uniform, &[5, 9, 200], &[1.0 / 3.0; 3]).unwrap();
        assert!((g.value(l).data()[0] - (259f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_single_token_copies_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_rows(&[&[1.0, -2.0, 0.5, 3.0]]));
        let k = g.constant(Tensor::from_rows(&[&[0.1, 0.2, 0.3, 0.4]]));
        let v = g.constant(Tensor::from_rows(&[&[7.0, 8.0, 9.0, 10.0]]));
        let o = g.causal_attention(q, k, v, 2).unwrap();
        assert_eq!(g.value(o).data(), &[7.0, 8.0, 9.0, 10.0]);
    }
}
