//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Values are computed eagerly when an operation is recorded; `backward`
//! replays the tape in reverse. Graphs are single-threaded by construction
//! and backward order is fixed, so gradients are bit-identical run to run.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<E: Scalar> {
    Leaf,
    StopGrad,
    Add(Var, Var),
    /// Matrix plus a rank-1 bias broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    Matmul(Var, Var),
    Exp(Var),
    Ln(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<E>,
        mean: Vec<E>,
    },
    SoftmaxRows(Var),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<E>,
        pad: usize,
        probs: Tensor<E>,
    },
    EmbedRows {
        table: Var,
        indices: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        prefix_len: usize,
        /// Per-head post-softmax attention matrices, saved for backward.
        probs: Vec<Tensor<E>>,
    },
    CrossAttention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        probs: Vec<Tensor<E>>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Sum(Var),
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every `requires_grad` node.
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    /// Gradient tensor for `v`, if any gradient flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Tape of eagerly evaluated operations.
pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: participates in gradient computation.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Identity in value, but blocks all gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += *x;
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x` is `[n, d]`, `bias` is `[d]`; the bias is added to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.shape().len() != 2 || vb.shape().len() != 1 || vx.cols() != vb.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} vs {:?}", vx.shape(), vb.shape()),
            ));
        }
        let d = vx.cols();
        let mut out = vx.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for j in 0..d {
                row[j] += vb.data()[j];
            }
        }
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: E) -> Var {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = *o * c;
        }
        let rg = self.needs(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -E::ONE);
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = matmul_nn(va, vb);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.exp()).collect();
        let out = Tensor::from_vec(self.value(x).shape(), data).expect("exp shape");
        let rg = self.needs(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        let out = Tensor::from_vec(self.value(x).shape(), data).expect("ln shape");
        let rg = self.needs(x);
        self.push(out, Op::Ln(x), rg)
    }

    /// Smooth GELU (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu_fwd(v)).collect();
        let out = Tensor::from_vec(self.value(x).shape(), data).expect("gelu shape");
        let rg = self.needs(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization with affine parameters.
    ///
    /// Variance is the population variance plus [`LAYER_NORM_EPS`], so
    /// constant rows normalize to zero instead of dividing by zero.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        if vx.shape().len() != 2
            || vg.shape().len() != 1
            || vb.shape().len() != 1
            || vg.cols() != vx.cols()
            || vb.cols() != vx.cols()
        {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let (n, d) = (vx.rows(), vx.cols());
        let eps = E::from_f64(LAYER_NORM_EPS);
        let inv_d = E::from_f64(1.0 / d as f64);
        let mut out = Tensor::zeros(&[n, d]);
        let mut rstd = Vec::with_capacity(n);
        let mut mean = Vec::with_capacity(n);
        for r in 0..n {
            let row = vx.row(r);
            let mut mu = E::ZERO;
            for &v in row {
                mu += v;
            }
            mu = mu * inv_d;
            let mut var = E::ZERO;
            for &v in row {
                let c = v - mu;
                var += c * c;
            }
            var = var * inv_d;
            let rs = E::ONE / (var + eps).sqrt();
            let orow = out.row_mut(r);
            for j in 0..d {
                let xh = (row[j] - mu) * rs;
                orow[j] = xh * vg.data()[j] + vb.data()[j];
            }
            rstd.push(rs);
            mean.push(mu);
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, rstd, mean }, rg))
    }

    /// Row-wise softmax; each output row sums to 1.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(Error::shape("softmax_rows", format!("{:?}", vx.shape())));
        }
        let (n, d) = (vx.rows(), vx.cols());
        let mut out = Tensor::zeros(&[n, d]);
        for r in 0..n {
            softmax_into(vx.row(r), out.row_mut(r));
        }
        let rg = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Fused log-softmax + negative log-likelihood, summed over rows with
    /// per-row constant weights. Rows whose target equals `pad` contribute
    /// zero loss and zero gradient. Returns a scalar.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[E],
        pad: usize,
    ) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 {
            return Err(Error::shape("cross_entropy_rows", format!("{:?}", vl.shape())));
        }
        let (n, k) = (vl.rows(), vl.cols());
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "cross_entropy_rows",
                format!("{n} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        for (r, &t) in targets.iter().enumerate() {
            if t != pad && t >= k {
                return Err(Error::Validation(format!(
                    "cross_entropy_rows: target {t} out of range 0..{k} at row {r}"
                )));
            }
        }
        let mut probs = Tensor::zeros(&[n, k]);
        let mut total = E::ZERO;
        for r in 0..n {
            let row = vl.row(r);
            // Stable log-sum-exp shared by the loss and the saved softmax.
            let mut m = row[0];
            for &v in row {
                m = m.maximum(v);
            }
            let mut sum = E::ZERO;
            for &v in row {
                sum += (v - m).exp();
            }
            let prow = probs.row_mut(r);
            for j in 0..k {
                prow[j] = (row[j] - m).exp() / sum;
            }
            if targets[r] != pad {
                let lse = m + sum.ln();
                total += weights[r] * (lse - row[targets[r]]);
            }
        }
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                pad,
                probs,
            },
            rg,
        ))
    }

    /// Gather rows of `table` at `indices`; backward scatter-adds.
    pub fn embed_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::shape("embedding_lookup", format!("{:?}", vt.shape())));
        }
        let (rows, d) = (vt.rows(), vt.cols());
        let mut out = Tensor::zeros(&[indices.len(), d]);
        for (r, &ix) in indices.iter().enumerate() {
            if ix >= rows {
                return Err(Error::Validation(format!(
                    "embedding_lookup: index {ix} out of range 0..{rows}"
                )));
            }
            out.row_mut(r).copy_from_slice(vt.row(ix));
        }
        let rg = self.needs(table);
        Ok(self.push(out, Op::EmbedRows { table, indices: indices.to_vec() }, rg))
    }

    /// Multi-head scaled dot-product attention over a single sequence.
    ///
    /// Positions below `prefix_len` attend to the whole prefix (and nothing
    /// after it); positions at or past `prefix_len` attend causally to
    /// everything up to and including themselves.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        prefix_len: usize,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let s = vq.rows();
        let d = vq.cols();
        if vq.shape() != vk.shape() || vq.shape() != vv.shape() || vq.shape().len() != 2 {
            return Err(Error::shape(
                "causal_self_attention",
                format!("q {:?}, k {:?}, v {:?}", vq.shape(), vk.shape(), vv.shape()),
            ));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::shape(
                "causal_self_attention",
                format!("d_model {d} not divisible by {n_heads} heads"),
            ));
        }
        if prefix_len > s {
            return Err(Error::shape(
                "causal_self_attention",
                format!("prefix_len {prefix_len} exceeds sequence length {s}"),
            ));
        }
        let dh = d / n_heads;
        let scl = E::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(&[s, d]);
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let off = h * dh;
            let mut p = Tensor::zeros(&[s, s]);
            for i in 0..s {
                let limit = attn_limit(i, prefix_len);
                let qi = &vq.row(i)[off..off + dh];
                let prow = p.row_mut(i);
                let mut m = E::from_f64(f64::NEG_INFINITY);
                for j in 0..limit {
                    let kj = &vk.row(j)[off..off + dh];
                    let mut dot = E::ZERO;
                    for t in 0..dh {
                        dot += qi[t] * kj[t];
                    }
                    let sc = dot * scl;
                    prow[j] = sc;
                    m = m.maximum(sc);
                }
                let mut sum = E::ZERO;
                for item in prow.iter_mut().take(limit) {
                    let e = (*item - m).exp();
                    *item = e;
                    sum += e;
                }
                for item in prow.iter_mut().take(limit) {
                    *item = *item / sum;
                }
                let orow = &mut out.row_mut(i)[off..off + dh];
                for j in 0..limit {
                    let pij = p.row(i)[j];
                    let vj = &vv.row(j)[off..off + dh];
                    for t in 0..dh {
                        orow[t] += pij * vj[t];
                    }
                }
            }
            probs.push(p);
        }
        let rg = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, Op::Attention { q, k, v, n_heads, prefix_len, probs }, rg))
    }

    /// Multi-head attention of `q` rows over `k`/`v` rows with full
    /// visibility (no mask). Row counts of `q` and `k` may differ.
    pub fn cross_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.shape().len() != 2 || vk.shape() != vv.shape() || vq.cols() != vk.cols() {
            return Err(Error::shape(
                "cross_attention",
                format!("q {:?}, k {:?}, v {:?}", vq.shape(), vk.shape(), vv.shape()),
            ));
        }
        let d = vq.cols();
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::shape(
                "cross_attention",
                format!("d_model {d} not divisible by {n_heads} heads"),
            ));
        }
        let (a, b) = (vq.rows(), vk.rows());
        if b == 0 {
            return Err(Error::shape("cross_attention", "empty key/value".to_string()));
        }
        let dh = d / n_heads;
        let scl = E::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(&[a, d]);
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let off = h * dh;
            let mut p = Tensor::zeros(&[a, b]);
            for i in 0..a {
                let qi = &vq.row(i)[off..off + dh];
                let prow = p.row_mut(i);
                let mut m = E::from_f64(f64::NEG_INFINITY);
                for j in 0..b {
                    let kj = &vk.row(j)[off..off + dh];
                    let mut dot = E::ZERO;
                    for t in 0..dh {
                        dot += qi[t] * kj[t];
                    }
                    let sc = dot * scl;
                    prow[j] = sc;
                    m = m.maximum(sc);
                }
                let mut sum = E::ZERO;
                for item in prow.iter_mut() {
                    let e = (*item - m).exp();
                    *item = e;
                    sum += e;
                }
                for item in prow.iter_mut() {
                    *item = *item / sum;
                }
                let orow = &mut out.row_mut(i)[off..off + dh];
                for j in 0..b {
                    let pij = p.row(i)[j];
                    let vj = &vv.row(j)[off..off + dh];
                    for t in 0..dh {
                        orow[t] += pij * vj[t];
                    }
                }
            }
            probs.push(p);
        }
        let rg = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, Op::CrossAttention { q, k, v, n_heads, probs }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs".to_string()));
        }
        let d = self.value(parts[0]).cols();
        let mut total = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.shape().len() != 2 || vp.cols() != d {
                return Err(Error::shape(
                    "concat_rows",
                    format!("expected [_, {d}], got {:?}", vp.shape()),
                ));
            }
            total += vp.rows();
        }
        let mut out = Tensor::zeros(&[total, d]);
        let mut r = 0;
        for &p in parts {
            let vp = self.value(p);
            for i in 0..vp.rows() {
                out.row_mut(r).copy_from_slice(vp.row(i));
                r += 1;
            }
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || start + len > vx.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, vx.shape()),
            ));
        }
        let d = vx.cols();
        let mut out = Tensor::zeros(&[len, d]);
        for i in 0..len {
            out.row_mut(i).copy_from_slice(vx.row(start + i));
        }
        let rg = self.needs(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Sum of all elements; returns a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut total = E::ZERO;
        for &v in self.value(x).data() {
            total += v;
        }
        let rg = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar root. Rejects non-scalar roots.
    pub fn backward(&self, root: Var) -> Result<Gradients<E>> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::Validation(format!(
                "backward: root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(E::ONE));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            if !node.requires_grad {
                // No trainable ancestor below this node: nothing to propagate.
                continue;
            }
            let g = grads[i].take().expect("grad present");
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Op<E>,
        value: &Tensor<E>,
        g: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) {
        match op {
            Op::Leaf => {}
            Op::StopGrad => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::AddRow(x, bias) => {
                self.accum(grads, *x, g.clone());
                if self.needs(*bias) {
                    let d = g.cols();
                    let mut db = Tensor::zeros(&[d]);
                    for r in 0..g.rows() {
                        let row = g.row(r);
                        for j in 0..d {
                            db.data_mut()[j] += row[j];
                        }
                    }
                    self.accum(grads, *bias, db);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = self.value(*b);
                    let data = g.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
                    self.accum(grads, *a, Tensor::from_vec(g.shape(), data).expect("mul da"));
                }
                if self.needs(*b) {
                    let va = self.value(*a);
                    let data = g.data().iter().zip(va.data()).map(|(x, y)| *x * *y).collect();
                    self.accum(grads, *b, Tensor::from_vec(g.shape(), data).expect("mul db"));
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    let data = g.data().iter().map(|v| *v * *c).collect();
                    self.accum(grads, *x, Tensor::from_vec(g.shape(), data).expect("scale dx"));
                }
            }
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    let da = matmul_nt(g, self.value(*b));
                    self.accum(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = matmul_tn(self.value(*a), g);
                    self.accum(grads, *b, db);
                }
            }
            Op::Exp(x) => {
                if self.needs(*x) {
                    let data = g.data().iter().zip(value.data()).map(|(gv, y)| *gv * *y).collect();
                    self.accum(grads, *x, Tensor::from_vec(g.shape(), data).expect("exp dx"));
                }
            }
            Op::Ln(x) => {
                if self.needs(*x) {
                    let vx = self.value(*x);
                    let data = g.data().iter().zip(vx.data()).map(|(gv, xv)| *gv / *xv).collect();
                    self.accum(grads, *x, Tensor::from_vec(g.shape(), data).expect("ln dx"));
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let vx = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(vx.data())
                        .map(|(gv, &xv)| *gv * gelu_bwd(xv))
                        .collect();
                    self.accum(grads, *x, Tensor::from_vec(g.shape(), data).expect("gelu dx"));
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd, mean } => {
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                let (n, d) = (vx.rows(), vx.cols());
                let inv_d = E::from_f64(1.0 / d as f64);
                let mut dx = Tensor::zeros(&[n, d]);
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                for r in 0..n {
                    let xrow = vx.row(r);
                    let grow = g.row(r);
                    let rs = rstd[r];
                    let mu = mean[r];
                    // dxhat, plus the two row means the backward needs.
                    let mut m1 = E::ZERO; // mean of dxhat
                    let mut m2 = E::ZERO; // mean of dxhat * xhat
                    let mut dxhat = vec![E::ZERO; d];
                    for j in 0..d {
                        let xh = (xrow[j] - mu) * rs;
                        let dh = grow[j] * vg.data()[j];
                        dxhat[j] = dh;
                        m1 += dh;
                        m2 += dh * xh;
                        dgamma.data_mut()[j] += grow[j] * xh;
                        dbeta.data_mut()[j] += grow[j];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    let dxrow = dx.row_mut(r);
                    for j in 0..d {
                        let xh = (xrow[j] - mu) * rs;
                        dxrow[j] = rs * (dxhat[j] - m1 - xh * m2);
                    }
                }
                if self.needs(*x) {
                    self.accum(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    self.accum(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    self.accum(grads, *beta, dbeta);
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let (n, d) = (value.rows(), value.cols());
                    let mut dx = Tensor::zeros(&[n, d]);
                    for r in 0..n {
                        let p = value.row(r);
                        let gr = g.row(r);
                        let mut dot = E::ZERO;
                        for j in 0..d {
                            dot += gr[j] * p[j];
                        }
                        let dxr = dx.row_mut(r);
                        for j in 0..d {
                            dxr[j] = p[j] * (gr[j] - dot);
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::CrossEntropyRows { logits, targets, weights, pad, probs } => {
                if self.needs(*logits) {
                    let up = g.item();
                    let (n, k) = (probs.rows(), probs.cols());
                    let mut dl = Tensor::zeros(&[n, k]);
                    for r in 0..n {
                        if targets[r] == *pad {
                            continue;
                        }
                        let scale = up * weights[r];
                        let prow = probs.row(r);
                        let drow = dl.row_mut(r);
                        for j in 0..k {
                            drow[j] = scale * prow[j];
                        }
                        drow[targets[r]] += -scale;
                    }
                    self.accum(grads, *logits, dl);
                }
            }
            Op::EmbedRows { table, indices } => {
                if self.needs(*table) {
                    let vt = self.value(*table);
                    let mut dt = Tensor::zeros(&[vt.rows(), vt.cols()]);
                    for (r, &ix) in indices.iter().enumerate() {
                        let grow = g.row(r);
                        let trow = dt.row_mut(ix);
                        for j in 0..grow.len() {
                            trow[j] += grow[j];
                        }
                    }
                    self.accum(grads, *table, dt);
                }
            }
            Op::Attention { q, k, v, n_heads, prefix_len, probs } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let s = vq.rows();
                let d = vq.cols();
                let dh = d / n_heads;
                let scl = E::from_f64(1.0 / (dh as f64).sqrt());
                let mut dq = Tensor::zeros(&[s, d]);
                let mut dk = Tensor::zeros(&[s, d]);
                let mut dv = Tensor::zeros(&[s, d]);
                for h in 0..*n_heads {
                    let off = h * dh;
                    let p = &probs[h];
                    for i in 0..s {
                        let limit = attn_limit(i, *prefix_len);
                        let go = &g.row(i)[off..off + dh];
                        // dP_ij = dO_i . V_j ; row-wise softmax backward.
                        let prow = p.row(i);
                        let mut dprow = vec![E::ZERO; limit];
                        let mut dot = E::ZERO;
                        for (j, dp) in dprow.iter_mut().enumerate() {
                            let vj = &vv.row(j)[off..off + dh];
                            let mut acc = E::ZERO;
                            for t in 0..dh {
                                acc += go[t] * vj[t];
                            }
                            *dp = acc;
                            dot += acc * prow[j];
                        }
                        let qi = &vq.row(i)[off..off + dh];
                        for j in 0..limit {
                            let ds = prow[j] * (dprow[j] - dot) * scl;
                            let kj = &vk.row(j)[off..off + dh];
                            let dqi = &mut dq.row_mut(i)[off..off + dh];
                            for t in 0..dh {
                                dqi[t] += ds * kj[t];
                            }
                            let dkj = &mut dk.row_mut(j)[off..off + dh];
                            for t in 0..dh {
                                dkj[t] += ds * qi[t];
                            }
                            let pij = prow[j];
                            let dvj = &mut dv.row_mut(j)[off..off + dh];
                            for t in 0..dh {
                                dvj[t] += pij * go[t];
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    self.accum(grads, *q, dq);
                }
                if self.needs(*k) {
                    self.accum(grads, *k, dk);
                }
                if self.needs(*v) {
                    self.accum(grads, *v, dv);
                }
            }
            Op::CrossAttention { q, k, v, n_heads, probs } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (a, b) = (vq.rows(), vk.rows());
                let d = vq.cols();
                let dh = d / n_heads;
                let scl = E::from_f64(1.0 / (dh as f64).sqrt());
                let mut dq = Tensor::zeros(&[a, d]);
                let mut dk = Tensor::zeros(&[b, d]);
                let mut dv = Tensor::zeros(&[b, d]);
                for h in 0..*n_heads {
                    let off = h * dh;
                    let p = &probs[h];
                    for i in 0..a {
                        let go = &g.row(i)[off..off + dh];
                        let prow = p.row(i);
                        let mut dprow = vec![E::ZERO; b];
                        let mut dot = E::ZERO;
                        for (j, dp) in dprow.iter_mut().enumerate() {
                            let vj = &vv.row(j)[off..off + dh];
                            let mut acc = E::ZERO;
                            for t in 0..dh {
                                acc += go[t] * vj[t];
                            }
                            *dp = acc;
                            dot += acc * prow[j];
                        }
                        let qi = &vq.row(i)[off..off + dh];
                        for j in 0..b {
                            let ds = prow[j] * (dprow[j] - dot) * scl;
                            let kj = &vk.row(j)[off..off + dh];
                            let dqi = &mut dq.row_mut(i)[off..off + dh];
                            for t in 0..dh {
                                dqi[t] += ds * kj[t];
                            }
                            let dkj = &mut dk.row_mut(j)[off..off + dh];
                            for t in 0..dh {
                                dkj[t] += ds * qi[t];
                            }
                            let pij = prow[j];
                            let dvj = &mut dv.row_mut(j)[off..off + dh];
                            for t in 0..dh {
                                dvj[t] += pij * go[t];
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    self.accum(grads, *q, dq);
                }
                if self.needs(*k) {
                    self.accum(grads, *k, dk);
                }
                if self.needs(*v) {
                    self.accum(grads, *v, dv);
                }
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let d = g.cols();
                        let mut dp = Tensor::zeros(&[rows, d]);
                        for i in 0..rows {
                            dp.row_mut(i).copy_from_slice(g.row(r + i));
                        }
                        self.accum(grads, p, dp);
                    }
                    r += rows;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let vx = self.value(*x);
                    let mut dx = Tensor::zeros(&[vx.rows(), vx.cols()]);
                    for i in 0..g.rows() {
                        dx.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let vx = self.value(*x);
                    let up = g.item();
                    self.accum(grads, *x, Tensor::filled(vx.shape(), up));
                }
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor<E>>], v: Var, delta: Tensor<E>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

#[inline]
fn attn_limit(i: usize, prefix_len: usize) -> usize {
    // Prefix rows see the whole prefix; later rows are causal.
    if i < prefix_len {
        prefix_len
    } else {
        i + 1
    }
}

/// Stable softmax of `row` into `out`.
pub fn softmax_into<E: Scalar>(row: &[E], out: &mut [E]) {
    let mut m = row[0];
    for &v in row {
        m = m.maximum(v);
    }
    let mut sum = E::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

pub(crate) fn gelu_fwd<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::ONE + u.tanh())
}

fn gelu_bwd<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.797_884_560_802_865_4);
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * c * (E::ONE + three * a * x * x)
}

/// C = A · B for 2-D tensors.
pub fn matmul_nn<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, kk) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(kk, b.rows());
    let mut c = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for (p, &aip) in arow.iter().enumerate() {
            let brow = b.row(p);
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// C = A · Bᵀ.
pub fn matmul_nt<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, kk) = (a.rows(), a.cols());
    let n = b.rows();
    debug_assert_eq!(kk, b.cols());
    let mut c = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for (j, cj) in crow.iter_mut().enumerate() {
            let brow = b.row(j);
            let mut acc = E::ZERO;
            for p in 0..kk {
                acc += arow[p] * brow[p];
            }
            *cj = acc;
        }
    }
    c
}

/// C = Aᵀ · B.
pub fn matmul_tn<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (s, m) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(s, b.rows());
    let mut c = Tensor::zeros(&[m, n]);
    for p in 0..s {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &api) in arow.iter().enumerate() {
            let crow = c.row_mut(i);
            for j in 0..n {
                crow[j] += api * brow[j];
            }
        }
    }
    c
}
