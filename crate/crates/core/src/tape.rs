//! Reverse-mode automatic differentiation over batched tensor operations.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes in execution
//! order (inputs always precede consumers) and replays it backwards exactly
//! once. Sequences of different lengths are batched "ragged": row matrices
//! hold the concatenated token rows of a whole batch and the attention op
//! receives per-instance spans, so no padding or masking is needed.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mathx;
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    /// out[i] = src[rows[i]] (+ optional positional rows from a second source)
    GatherRows {
        src: NodeId,
        rows: Vec<u32>,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    /// out = a . b^T with b stored row-major as [n, k]
    MatmulBt {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddRowBroadcast {
        x: NodeId,
        bias: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    /// Multi-head bidirectional self-attention over per-instance row spans.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        spans: Vec<(usize, usize)>,
    },
    /// out row p = [x[pairs[p].0] ; x[pairs[p].1]]
    ConcatPairs {
        x: NodeId,
        pairs: Vec<(u32, u32)>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<u32>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    /// Forward activations the backward pass needs (softmax probabilities,
    /// layer-norm statistics).
    cache: Vec<f64>,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    param_bindings: Vec<(ParamId, NodeId)>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_bindings: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, op: Op, value: Tensor, cache: Vec<f64>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            cache,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, Vec::new(), false)
    }

    /// A leaf whose gradient is wanted even though it is not a stored
    /// parameter (used by gradient tests).
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, Vec::new(), true)
    }

    /// Copy a parameter out of the store; its gradient is routed back via
    /// [`Tape::accumulate_param_grads`]. Repeated requests for the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.param_bindings.iter().find(|(pid, _)| *pid == id) {
            return node;
        }
        let node = self.push(Op::Param(id), store.value(id).clone(), Vec::new(), true);
        self.param_bindings.push((id, node));
        node
    }

    pub fn gather_rows(&mut self, src: NodeId, rows: Vec<u32>) -> Result<NodeId> {
        let (n_src, cols) = self.value(src).dims2();
        if let Some(&bad) = rows.iter().find(|&&r| r as usize >= n_src) {
            return Err(CoreError::Size(alloc::format!(
                "gather_rows: row {bad} out of {n_src}"
            )));
        }
        let src_vals = self.value(src).values();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            out.extend_from_slice(&src_vals[r as usize * cols..(r as usize + 1) * cols]);
        }
        let needs = self.needs(src);
        let value = Tensor::from_values(&[rows.len(), cols], out)?;
        Ok(self.push(Op::GatherRows { src, rows }, value, Vec::new(), needs))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2();
        let (kb, n) = self.value(b).dims2();
        if ka != kb {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let out = tensor::matmul(self.value(a).values(), self.value(b).values(), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_values(&[m, n], out)?;
        Ok(self.push(Op::Matmul { a, b }, value, Vec::new(), needs))
    }

    /// a[m,k] . b[n,k]^T -> [m,n]; `b` is the natural layout for a
    /// classifier with one weight row per class.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2();
        let (n, kb) = self.value(b).dims2();
        if ka != kb {
            return Err(CoreError::ShapeMismatch {
                op: "matmul_bt",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_bt_acc(
            self.value(a).values(),
            self.value(b).values(),
            m,
            ka,
            n,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_values(&[m, n], out)?;
        Ok(self.push(Op::MatmulBt { a, b }, value, Vec::new(), needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(CoreError::ShapeMismatch {
                op: "add",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_values(&shape, out)?;
        Ok(self.push(Op::Add { a, b }, value, Vec::new(), needs))
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2();
        if self.value(bias).numel() != d {
            return Err(CoreError::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.value(x).shape().to_vec(),
                right: self.value(bias).shape().to_vec(),
            });
        }
        let bias_vals = self.value(bias).values().to_vec();
        let mut out = self.value(x).values().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(&bias_vals) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        let value = Tensor::from_values(&[n, d], out)?;
        Ok(self.push(Op::AddRowBroadcast { x, bias }, value, Vec::new(), needs))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).values().iter().map(|&v| tensor::gelu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        let value = Tensor::from_values(&shape, out)?;
        Ok(self.push(Op::Gelu { x }, value, Vec::new(), needs))
    }

    /// Row-wise layer normalization with learned gain and bias:
    /// `y = gain * (x - mean) / sqrt(var + eps) + bias`, population variance
    /// over each row.
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2();
        if d < 2 {
            return Err(CoreError::Precondition(alloc::format!(
                "layer_norm needs width >= 2, got {d}"
            )));
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                left: self.value(x).shape().to_vec(),
                right: self.value(gain).shape().to_vec(),
            });
        }
        let gain_vals = self.value(gain).values().to_vec();
        let bias_vals = self.value(bias).values().to_vec();
        let xv = self.value(x).values();
        let mut out = vec![0.0; n * d];
        let mut cache = vec![0.0; 2 * n]; // (mean, inv_std) per row
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / mathx::sqrt(var + eps);
            cache[2 * i] = mean;
            cache[2 * i + 1] = inv_std;
            for j in 0..d {
                out[i * d + j] = gain_vals[j] * (row[j] - mean) * inv_std + bias_vals[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let value = Tensor::from_values(&[n, d], out)?;
        Ok(self.push(Op::LayerNormRows { x, gain, bias }, value, cache, needs))
    }

    /// Spec-level single-vector layer norm.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        self.layer_norm_rows(x, gain, bias, eps)
    }

    /// Multi-head self-attention. `q`, `k`, `v` are `[total_rows, d]`;
    /// `spans` lists the `(start, len)` row range of each instance.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        spans: Vec<(usize, usize)>,
    ) -> Result<NodeId> {
        let (n, d) = self.value(q).dims2();
        if self.value(k).shape() != self.value(q).shape()
            || self.value(v).shape() != self.value(q).shape()
        {
            return Err(CoreError::ShapeMismatch {
                op: "attention",
                left: self.value(q).shape().to_vec(),
                right: self.value(k).shape().to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(CoreError::Config(alloc::format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        let covered: usize = spans.iter().map(|&(_, len)| len).sum();
        if covered != n || spans.iter().any(|&(s, l)| s + l > n) {
            return Err(CoreError::Size(alloc::format!(
                "attention spans cover {covered} of {n} rows"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / mathx::sqrt(dh as f64);
        let qv = self.value(q).values();
        let kv = self.value(k).values();
        let vv = self.value(v).values();
        let mut out = vec![0.0; n * d];
        let cache_len: usize = spans.iter().map(|&(_, l)| heads * l * l).sum();
        let mut cache = Vec::with_capacity(cache_len);
        for &(start, len) in &spans {
            for h in 0..heads {
                let col = h * dh;
                let mut probs = vec![0.0; len * len];
                for i in 0..len {
                    let qrow = &qv[(start + i) * d + col..(start + i) * d + col + dh];
                    let prow = &mut probs[i * len..(i + 1) * len];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let krow = &kv[(start + j) * d + col..(start + j) * d + col + dh];
                        let mut s = 0.0;
                        for (&a, &b) in qrow.iter().zip(krow.iter()) {
                            s += a * b;
                        }
                        *pj = s * scale;
                    }
                    tensor::softmax_row(prow);
                    let orow = &mut out[(start + i) * d + col..(start + i) * d + col + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vv[(start + j) * d + col..(start + j) * d + col + dh];
                        for (o, &x) in orow.iter_mut().zip(vrow.iter()) {
                            *o += p * x;
                        }
                    }
                }
                cache.extend_from_slice(&probs);
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let value = Tensor::from_values(&[n, d], out)?;
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                spans,
            },
            value,
            cache,
            needs,
        ))
    }

    pub fn concat_pairs(&mut self, x: NodeId, pairs: Vec<(u32, u32)>) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2();
        if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a as usize >= n || b as usize >= n) {
            return Err(CoreError::Size(alloc::format!(
                "concat_pairs: pair ({a},{b}) out of {n} rows"
            )));
        }
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(pairs.len() * 2 * d);
        for &(a, b) in &pairs {
            out.extend_from_slice(&xv[a as usize * d..(a as usize + 1) * d]);
            out.extend_from_slice(&xv[b as usize * d..(b as usize + 1) * d]);
        }
        let needs = self.needs(x);
        let value = Tensor::from_values(&[pairs.len(), 2 * d], out)?;
        Ok(self.push(Op::ConcatPairs { x, pairs }, value, Vec::new(), needs))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max subtraction. Backward is `(softmax - onehot) / n`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<u32>) -> Result<NodeId> {
        let (n, c) = self.value(logits).dims2();
        if labels.len() != n {
            return Err(CoreError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: vec![n, c],
                right: vec![labels.len()],
            });
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|&(_, &l)| l as usize >= c) {
            return Err(CoreError::LabelOutOfRange {
                index: i,
                label: l as usize,
                classes: c,
            });
        }
        let lv = self.value(logits).values();
        let mut probs = lv.to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            tensor::softmax_row(row);
            loss -= mathx::ln(row[labels[i] as usize].max(f64::MIN_POSITIVE));
        }
        loss /= n as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, labels },
            Tensor::scalar(loss),
            probs,
            needs,
        ))
    }

    /// Softmax probabilities cached by a cross-entropy node (`n x c`).
    pub fn cached_probs(&self, sce: NodeId) -> Option<&[f64]> {
        match self.nodes[sce.0].op {
            Op::SoftmaxCrossEntropy { .. } => Some(&self.nodes[sce.0].cache),
            _ => None,
        }
    }

    fn add_grad(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, &d) in grad.iter_mut().zip(delta.iter()) {
            *g += d;
        }
    }

    /// Run the backward pass from a scalar `loss` node. Visits every node at
    /// most once, in reverse execution order; returns the number visited.
    /// Calling it a second time without a fresh forward is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<usize> {
        if self.backward_done {
            return Err(CoreError::Tape("backward called twice on one forward"));
        }
        if self.value(loss).numel() != 1 {
            return Err(CoreError::Tape("backward requires a scalar loss"));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            visited += 1;
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Param(_) => {}
                Op::GatherRows { src, rows } => {
                    let (_, cols) = self.nodes[src.0].value.dims2();
                    if self.nodes[src.0].needs_grad {
                        let n_src = self.nodes[src.0].value.numel();
                        let g = self.nodes[src.0]
                            .grad
                            .get_or_insert_with(|| vec![0.0; n_src]);
                        for (i_row, &r) in rows.iter().enumerate() {
                            let dst = &mut g[r as usize * cols..(r as usize + 1) * cols];
                            let srcg = &grad[i_row * cols..(i_row + 1) * cols];
                            for (o, &v) in dst.iter_mut().zip(srcg) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let (m, k) = self.nodes[a.0].value.dims2();
                    let (_, n) = self.nodes[b.0].value.dims2();
                    if self.nodes[a.0].needs_grad {
                        // dA = dC . B^T
                        let mut da = vec![0.0; m * k];
                        tensor::matmul_bt_acc(
                            &grad,
                            self.nodes[b.0].value.values(),
                            m,
                            n,
                            k,
                            &mut da,
                        );
                        self.add_grad(a, &da);
                    }
                    if self.nodes[b.0].needs_grad {
                        // dB = A^T . dC
                        let mut db = vec![0.0; k * n];
                        tensor::matmul_at_acc(
                            self.nodes[a.0].value.values(),
                            &grad,
                            m,
                            k,
                            n,
                            &mut db,
                        );
                        self.add_grad(b, &db);
                    }
                }
                Op::MatmulBt { a, b } => {
                    let (m, k) = self.nodes[a.0].value.dims2();
                    let (n, _) = self.nodes[b.0].value.dims2();
                    if self.nodes[a.0].needs_grad {
                        // dA = dC . B
                        let mut da = vec![0.0; m * k];
                        tensor::matmul_acc(
                            &grad,
                            self.nodes[b.0].value.values(),
                            m,
                            n,
                            k,
                            &mut da,
                        );
                        self.add_grad(a, &da);
                    }
                    if self.nodes[b.0].needs_grad {
                        // dB = dC^T . A
                        let mut db = vec![0.0; n * k];
                        tensor::matmul_at_acc(
                            &grad,
                            self.nodes[a.0].value.values(),
                            m,
                            n,
                            k,
                            &mut db,
                        );
                        self.add_grad(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    self.add_grad(a, &grad);
                    self.add_grad(b, &grad);
                }
                Op::AddRowBroadcast { x, bias } => {
                    let (_, d) = self.nodes[x.0].value.dims2();
                    self.add_grad(x, &grad);
                    if self.nodes[bias.0].needs_grad {
                        let mut db = vec![0.0; d];
                        for row in grad.chunks(d) {
                            for (o, &g) in db.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                        self.add_grad(bias, &db);
                    }
                }
                Op::Gelu { x } => {
                    let dg: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[x.0].value.values())
                        .map(|(&g, &v)| g * tensor::gelu_grad(v))
                        .collect();
                    self.add_grad(x, &dg);
                }
                Op::LayerNormRows { x, gain, bias } => {
                    let (n, d) = self.nodes[x.0].value.dims2();
                    let cache = core::mem::take(&mut self.nodes[i].cache);
                    let gain_vals = self.nodes[gain.0].value.values().to_vec();
                    let xv = self.nodes[x.0].value.values().to_vec();
                    let mut dx = vec![0.0; n * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for r in 0..n {
                        let mean = cache[2 * r];
                        let inv_std = cache[2 * r + 1];
                        let gout = &grad[r * d..(r + 1) * d];
                        let row = &xv[r * d..(r + 1) * d];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            dgain[j] += gout[j] * xhat;
                            dbias[j] += gout[j];
                            let dxhat = gout[j] * gain_vals[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = gout[j] * gain_vals[j];
                            dx[r * d + j] = inv_std
                                * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(gain, &dgain);
                    self.add_grad(bias, &dbias);
                    self.nodes[i].cache = cache;
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    spans,
                } => {
                    let (n, d) = self.nodes[q.0].value.dims2();
                    let dh = d / heads;
                    let scale = 1.0 / mathx::sqrt(dh as f64);
                    let cache = core::mem::take(&mut self.nodes[i].cache);
                    let qv = self.nodes[q.0].value.values().to_vec();
                    let kv = self.nodes[k.0].value.values().to_vec();
                    let vv = self.nodes[v.0].value.values().to_vec();
                    let mut dq = vec![0.0; n * d];
                    let mut dk = vec![0.0; n * d];
                    let mut dv = vec![0.0; n * d];
                    let mut off = 0;
                    for &(start, len) in &spans {
                        for h in 0..heads {
                            let col = h * dh;
                            let probs = &cache[off..off + len * len];
                            off += len * len;
                            for ii in 0..len {
                                let gout = &grad[(start + ii) * d + col..(start + ii) * d + col + dh];
                                let prow = &probs[ii * len..(ii + 1) * len];
                                // dV and dP
                                let mut dp = vec![0.0; len];
                                for (j, &p) in prow.iter().enumerate() {
                                    let vrow =
                                        &vv[(start + j) * d + col..(start + j) * d + col + dh];
                                    let dvrow =
                                        &mut dv[(start + j) * d + col..(start + j) * d + col + dh];
                                    let mut s = 0.0;
                                    for (x, (&g, &vx)) in
                                        dvrow.iter_mut().zip(gout.iter().zip(vrow.iter()))
                                    {
                                        *x += p * g;
                                        s += g * vx;
                                    }
                                    dp[j] = s;
                                }
                                // softmax backward: ds = p * (dp - sum(dp * p))
                                let dot: f64 =
                                    dp.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum();
                                for (j, &p) in prow.iter().enumerate() {
                                    let ds = p * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let krow =
                                        &kv[(start + j) * d + col..(start + j) * d + col + dh];
                                    let qrow =
                                        &qv[(start + ii) * d + col..(start + ii) * d + col + dh];
                                    let dqrow =
                                        &mut dq[(start + ii) * d + col..(start + ii) * d + col + dh];
                                    for (x, &kx) in dqrow.iter_mut().zip(krow.iter()) {
                                        *x += ds * kx;
                                    }
                                    let dkrow =
                                        &mut dk[(start + j) * d + col..(start + j) * d + col + dh];
                                    for (x, &qx) in dkrow.iter_mut().zip(qrow.iter()) {
                                        *x += ds * qx;
                                    }
                                }
                            }
                        }
                    }
                    self.add_grad(q, &dq);
                    self.add_grad(k, &dk);
                    self.add_grad(v, &dv);
                    self.nodes[i].cache = cache;
                }
                Op::ConcatPairs { x, pairs } => {
                    let (_, d) = self.nodes[x.0].value.dims2();
                    if self.nodes[x.0].needs_grad {
                        let n_x = self.nodes[x.0].value.numel();
                        let g = self.nodes[x.0].grad.get_or_insert_with(|| vec![0.0; n_x]);
                        for (p, &(a, b)) in pairs.iter().enumerate() {
                            let ga = &grad[p * 2 * d..p * 2 * d + d];
                            let gb = &grad[p * 2 * d + d..(p + 1) * 2 * d];
                            for (o, &v) in g[a as usize * d..(a as usize + 1) * d]
                                .iter_mut()
                                .zip(ga)
                            {
                                *o += v;
                            }
                            for (o, &v) in g[b as usize * d..(b as usize + 1) * d]
                                .iter_mut()
                                .zip(gb)
                            {
                                *o += v;
                            }
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let (n, c) = self.nodes[logits.0].value.dims2();
                    let g = grad[0] / n as f64;
                    let probs = &self.nodes[i].cache;
                    let mut dl = Vec::with_capacity(n * c);
                    for (r, row) in probs.chunks(c).enumerate() {
                        let label = labels[r] as usize;
                        for (j, &p) in row.iter().enumerate() {
                            dl.push(g * (p - if j == label { 1.0 } else { 0.0 }));
                        }
                    }
                    self.add_grad(logits, &dl);
                }
            }
            // Keep gradients readable on leaves/params; interior nodes have
            // already propagated theirs.
            self.nodes[i].grad = Some(grad);
        }
        Ok(visited)
    }

    /// Add every bound parameter's tape gradient into the store's gradient
    /// buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Op::Param(pid), Some(g)) = (&node.op, node.grad.as_deref()) {
                store.accumulate_grad(*pid, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tensor_rand(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| rng.next_f64() * 4.0 - 2.0).collect();
        Tensor::from_values(shape, vals).unwrap()
    }

    /// Central finite differences on one leaf input of an arbitrary scalar
    /// graph, compared against the analytic gradient.
    fn fd_check<F>(build: F, inputs: &mut [Tensor], check: usize, h: f64, tol: f64)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(ids[check]).unwrap().to_vec();

        let mut worst = 0.0f64;
        for i in 0..inputs[check].numel() {
            let orig = inputs[check].values()[i];
            let eval = |v: f64, inputs: &mut [Tensor]| -> f64 {
                inputs[check].values_mut()[i] = v;
                let mut t = Tape::new();
                let ids: Vec<NodeId> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
                let loss = build(&mut t, &ids);
                t.value(loss).values()[0]
            };
            let up = eval(orig + h, inputs);
            let down = eval(orig - h, inputs);
            inputs[check].values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let diff = (analytic[i] - numeric).abs();
            let rel = if diff < 1e-7 {
                0.0
            } else {
                diff / analytic[i].abs().max(numeric.abs())
            };
            worst = worst.max(rel);
        }
        assert!(worst < tol, "fd mismatch: worst rel err {worst}");
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::from_values(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = tape.leaf(Tensor::from_values(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c).values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_unit_selector_row() {
        let mut tape = Tape::new();
        let sel = tape.leaf(Tensor::from_values(&[1, 2], vec![1.0, 0.0]).unwrap());
        let col = tape.leaf(Tensor::from_values(&[2, 1], vec![5.0, 7.0]).unwrap());
        let c = tape.matmul(sel, col).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 1]);
        assert_eq!(tape.value(c).values(), &[5.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        match tape.matmul(a, b) {
            Err(CoreError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = Rng::from_seed(1);
        let mut inputs = vec![tensor_rand(&mut rng, &[3, 4]), tensor_rand(&mut rng, &[4, 2])];
        let build = |t: &mut Tape, ids: &[NodeId]| {
            let c = t.matmul(ids[0], ids[1]).unwrap();
            // reduce to scalar with a fixed weighting so gradients are dense
            let w = t.leaf(Tensor::from_values(&[2, 1], vec![0.7, -1.3]).unwrap());
            let s = t.matmul(c, w).unwrap();
            let ones = t.leaf(Tensor::from_values(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap());
            t.matmul(ones, s).unwrap()
        };
        fd_check(build, &mut inputs, 0, 1e-5, 1e-6);
        fd_check(build, &mut inputs, 1, 1e-5, 1e-6);
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance_passthrough() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_values(&[1, 2], vec![1.0, -1.0]).unwrap());
        let gain = tape.leaf(Tensor::from_values(&[2], vec![1.0, 1.0]).unwrap());
        let bias = tape.leaf(Tensor::from_values(&[2], vec![0.0, 0.0]).unwrap());
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        let out = tape.value(y).values();
        assert!((out[0] - 1.0).abs() < 1e-6);
        assert!((out[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_values(&[1, 2], vec![3.7, 3.7]).unwrap());
        let gain = tape.leaf(Tensor::from_values(&[2], vec![1.0, 1.0]).unwrap());
        let bias = tape.leaf(Tensor::from_values(&[2], vec![0.25, -0.5]).unwrap());
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        let out = tape.value(y).values();
        assert!((out[0] - 0.25).abs() < 1e-12);
        assert!((out[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rejects_width_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_values(&[1, 1], vec![1.0]).unwrap());
        let gain = tape.leaf(Tensor::from_values(&[1], vec![1.0]).unwrap());
        let bias = tape.leaf(Tensor::from_values(&[1], vec![0.0]).unwrap());
        assert!(matches!(
            tape.layer_norm(x, gain, bias, 1e-5),
            Err(CoreError::Precondition(_))
        ));
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = Rng::from_seed(2);
        let mut inputs = vec![
            tensor_rand(&mut rng, &[1, 8]),
            tensor_rand(&mut rng, &[8]),
            tensor_rand(&mut rng, &[8]),
        ];
        let build = |t: &mut Tape, ids: &[NodeId]| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
            let w = t.leaf(Tensor::from_values(&[8, 1], vec![0.3; 8]).unwrap());
            t.matmul(y, w).unwrap()
        };
        for check in 0..3 {
            fd_check(build, &mut inputs, check, 1e-5, 1e-5);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 4]));
        let loss = tape.softmax_cross_entropy(logits, vec![2]).unwrap();
        let expect = mathx::ln(4.0);
        assert!((tape.value(loss).values()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_values(&[1, 2], vec![10.0, -10.0]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, vec![0]).unwrap();
        let got = tape.value(loss).values()[0];
        assert!((got - 2.061e-9).abs() < 1e-11, "loss {got}");
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 3]));
        match tape.softmax_cross_entropy(logits, vec![1, 3]) {
            Err(CoreError::LabelOutOfRange { index, label, classes }) => {
                assert_eq!((index, label, classes), (1, 3, 3));
            }
            other => panic!("expected label error, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let mut rng = Rng::from_seed(3);
        let mut inputs = vec![tensor_rand(&mut rng, &[5, 7])];
        let labels = vec![0u32, 3, 6, 2, 2];
        let build = move |t: &mut Tape, ids: &[NodeId]| {
            t.softmax_cross_entropy(ids[0], labels.clone()).unwrap()
        };
        fd_check(build, &mut inputs, 0, 1e-5, 1e-5);
    }

    #[test]
    fn cached_probs_rows_sum_to_one() {
        let mut rng = Rng::from_seed(4);
        let mut tape = Tape::new();
        let logits = tape.leaf(tensor_rand(&mut rng, &[6, 5]));
        let loss = tape.softmax_cross_entropy(logits, vec![0, 1, 2, 3, 4, 0]).unwrap();
        for row in tape.cached_probs(loss).unwrap().chunks(5) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = Rng::from_seed(5);
        let mut inputs = vec![
            tensor_rand(&mut rng, &[5, 4]),
            tensor_rand(&mut rng, &[5, 4]),
            tensor_rand(&mut rng, &[5, 4]),
        ];
        let build = |t: &mut Tape, ids: &[NodeId]| {
            let o = t
                .attention(ids[0], ids[1], ids[2], 2, vec![(0, 3), (3, 2)])
                .unwrap();
            let w = t.leaf(Tensor::from_values(&[4, 1], vec![0.9, -0.4, 0.2, 1.1]).unwrap());
            let s = t.matmul(o, w).unwrap();
            let ones = t.leaf(Tensor::from_values(&[1, 5], vec![1.0; 5]).unwrap());
            t.matmul(ones, s).unwrap()
        };
        for check in 0..3 {
            fd_check(build, &mut inputs, check, 1e-5, 1e-5);
        }
    }

    #[test]
    fn gather_concat_gelu_broadcast_gradients() {
        let mut rng = Rng::from_seed(6);
        let mut inputs = vec![tensor_rand(&mut rng, &[4, 3]), tensor_rand(&mut rng, &[3])];
        let build = |t: &mut Tape, ids: &[NodeId]| {
            let g = t.gather_rows(ids[0], vec![1, 3, 0, 1]).unwrap();
            let b = t.add_row_broadcast(g, ids[1]).unwrap();
            let a = t.gelu(b).unwrap();
            let c = t.concat_pairs(a, vec![(0, 2), (1, 3)]).unwrap();
            let w = t.leaf(Tensor::from_values(&[6, 1], vec![0.5, -1.0, 0.25, 0.8, -0.3, 1.2]).unwrap());
            let s = t.matmul(c, w).unwrap();
            let ones = t.leaf(Tensor::from_values(&[1, 2], vec![1.0, 1.0]).unwrap());
            t.matmul(ones, s).unwrap()
        };
        fd_check(build, &mut inputs, 0, 1e-5, 1e-5);
        fd_check(build, &mut inputs, 1, 1e-5, 1e-5);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.0));
        let y = tape.matmul(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap(), 2);
        assert!(matches!(tape.backward(y), Err(CoreError::Tape(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(CoreError::Tape(_))));
    }

    #[test]
    fn backward_visits_every_node() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::from_values(&[1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::from_values(&[2, 1], vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let visited = tape.backward(c).unwrap();
        assert_eq!(visited, tape.len());
    }

    #[test]
    fn forward_keeps_values_finite_on_finite_inputs() {
        let mut rng = Rng::from_seed(8);
        let mut tape = Tape::new();
        let x = tape.leaf(tensor_rand(&mut rng, &[6, 4]));
        let g = tape.leaf(Tensor::from_values(&[4], vec![1.0; 4]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[4]));
        let ln = tape.layer_norm_rows(x, g, b, 1e-5).unwrap();
        let at = tape.attention(ln, ln, ln, 2, vec![(0, 6)]).unwrap();
        let ge = tape.gelu(at).unwrap();
        let loss = tape
            .softmax_cross_entropy(ge, vec![0, 1, 2, 3, 0, 1])
            .unwrap();
        assert!(tape.value(ge).is_finite());
        assert!(tape.value(loss).is_finite());
    }
}
