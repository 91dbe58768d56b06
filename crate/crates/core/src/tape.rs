//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every operation appends a node to the [`Tape`] and returns a [`Var`]
//! handle. Nodes are appended after their inputs, so walking the tape from
//! the end visits each node once, in reverse topological order.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quantize::QuantizedMatrix;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Scalar, Tensor};

/// LayerNorm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    QMatMul(Arc<QuantizedMatrix>, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax {
        input: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    CausalMask {
        input: Var,
        prefix_len: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    flops: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Option<Vec<usize>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`. `None` if `v` does not
    /// require grad; an all-zero tensor if it does but the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let shape = self.shapes[v.0].as_ref()?;
        Some(
            self.grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(shape)),
        )
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        let shape = self.shapes[v.0].as_ref()?;
        Some(
            self.grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(shape)),
        )
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of all matrix products recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Frozen leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.flops += (m * k * n) as u64;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Product of a frozen 4-bit matrix with `x`, dequantizing block by block.
    /// Gradients flow to `x` only.
    pub fn qmatmul(&mut self, q: &Arc<QuantizedMatrix>, x: Var) -> Result<Var> {
        let (rows, cols) = q.shape();
        let (k, n) = self.dims2(x)?;
        if cols != k {
            return Err(Error::shape("qmatmul", &[rows, cols], self.shape(x)));
        }
        let mut out = vec![T::zero(); rows * n];
        q.matmul_into(self.value(x).data(), n, &mut out);
        self.flops += (rows * cols * n) as u64;
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(vec![rows, n], out)?,
            Op::QMatMul(Arc::clone(q), x),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).len() != n {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddBias(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.requires_grad(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Exact GeLU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        let rg = self.requires_grad(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Softmax along `axis`, max-subtracted. Entries equal to `-inf` get
    /// probability zero; NaN is rejected.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Usage(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let input = self.value(a);
        if input.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = input.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * axis_len * inner + j * inner + i;
                let max = (0..axis_len)
                    .map(|j| src[at(j)])
                    .fold(T::neg_infinity(), T::max);
                if max == T::neg_infinity() {
                    return Err(Error::Numeric("softmax over a fully masked slice".into()));
                }
                let mut total = T::zero();
                for j in 0..axis_len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..axis_len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                input: a,
                outer,
                axis_len,
                inner,
            },
            rg,
        ))
    }

    /// Per-row normalization over the last dimension followed by the affine
    /// map `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::Usage("layer_norm of a scalar".into()))?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let nf = T::from_f64(n as f64);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / n.max(1);
        let mut normed = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                normed[r * n + j] = xh;
                out[r * n + j] = g[j] * xh + b[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Sets `scores[i][j]` to `-inf` where key `j` lies in the future of
    /// query `i`. The first `prefix_len` keys are always visible.
    pub fn causal_mask(&mut self, scores: Var, prefix_len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(scores)?;
        let mut data = self.value(scores).data().to_vec();
        for i in 0..rows {
            for j in (prefix_len + i + 1).min(cols)..cols {
                data[i * cols + j] = T::neg_infinity();
            }
        }
        let rg = self.requires_grad(scores);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::CausalMask {
                input: scores,
                prefix_len,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a)?;
        if start + len > cols {
            return Err(Error::shape("slice_cols", &[rows, cols], &[start, len]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(vec![rows, len], data)?,
            Op::SliceCols { input: a, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let (rows, _) = self.dims2(first)?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let (_, cols) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Usage(format!(
                "row index {bad} out of range for {n} rows"
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-softmax probability of `targets` over rows whose
    /// `mask` entry is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits)?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                &[rows, vocab],
                &[targets.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Usage(
                "cross_entropy with every position masked".into(),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * vocab];
        let mut loss = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= vocab {
                return Err(Error::Usage(format!(
                    "target {} outside vocab {vocab}",
                    targets[r]
                )));
            }
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[targets[r]];
            for j in 0..vocab {
                probs[r * vocab + j] = (row[j] - log_z).exp();
            }
        }
        let loss = loss / T::from_f64(count as f64);
        if loss.is_nan() {
            return Err(Error::Numeric("cross entropy is NaN".into()));
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|nd| nd.requires_grad.then(|| nd.value.shape().to_vec()))
            .collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, nd)| {
                g.filter(|_| nd.requires_grad)
                    .map(|g| Tensor::new(nd.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    matmul_nt_into(g, bv, ga, m, n, k);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    matmul_tn_into(av, g, gb, k, m, n);
                }
            }
            Op::QMatMul(q, x) => {
                let n = self.value(*x).shape()[1];
                if let Some(gx) = self.accumulate(grads, *x) {
                    q.matmul_t_into(g, n, gx);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.accumulate(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    add_into(gx, g);
                }
                let n = self.value(*bias).len();
                if let Some(gb) = self.accumulate(grads, *bias) {
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                }
                let av = self.value(*a).data();
                if let Some(gb) = self.accumulate(grads, *b) {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += gi * *c;
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += gi * gelu_derivative(xi);
                    }
                }
            }
            Op::Softmax {
                input,
                outer,
                axis_len,
                inner,
            } => {
                let y = node.value.data();
                if let Some(ga) = self.accumulate(grads, *input) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * axis_len * inner + j * inner + i;
                            let dot: T = (0..*axis_len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*axis_len {
                                ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let n = self.value(*gamma).len();
                let nf = T::from_f64(n as f64);
                let gm = self.value(*gamma).data();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * n..(r + 1) * n;
                        let dxh: Vec<T> = g[row.clone()]
                            .iter()
                            .zip(gm)
                            .map(|(&a, &b)| a * b)
                            .collect();
                        let xh = &normed[row.clone()];
                        let mean_d = dxh.iter().copied().sum::<T>() / nf;
                        let mean_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for j in 0..n {
                            gx[r * n + j] += rs * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                if let Some(gg) = self.accumulate(grads, *gamma) {
                    for (gr, xr) in g.chunks_exact(n).zip(normed.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(gb) = self.accumulate(grads, *beta) {
                    for gr in g.chunks_exact(n) {
                        add_into(gb, gr);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::CausalMask { input, prefix_len } => {
                let (rows, cols) = node.value.dims2().unwrap();
                if let Some(ga) = self.accumulate(grads, *input) {
                    for i in 0..rows {
                        let visible = (prefix_len + i + 1).min(cols);
                        for j in 0..visible {
                            ga[i * cols + j] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::SliceCols { input, start } => {
                let (rows, len) = node.value.dims2().unwrap();
                let cols = self.value(*input).shape()[1];
                if let Some(ga) = self.accumulate(grads, *input) {
                    for r in 0..rows {
                        add_into(
                            &mut ga[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if let Some(gp) = self.accumulate(grads, p) {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + offset..r * total + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.accumulate(grads, p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { table, ids } => {
                let d = self.value(*table).shape()[1];
                if let Some(gt) = self.accumulate(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).shape()[1];
                let coef = g[0] / T::from_f64(*count as f64);
                if let Some(gl) = self.accumulate(grads, *logits) {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..vocab {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * vocab + j] += coef * (probs[r * vocab + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    T::from_f64(xf * normal_cdf(xf))
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::from_f64(normal_cdf(xf) + xf * pdf)
}
