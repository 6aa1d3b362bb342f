//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; [`Graph::backward`] walks it once in reverse.

use crate::error::{Error, Result};
use crate::numeric::tensor::{dims2, gemm, softmax_row_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Shape and masking information for a fused multi-head attention node.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Permission table `[batch, seq, past + seq]`; `true` = may attend.
    pub mask: Vec<bool>,
    /// Cached keys and values, each `[heads, past, head_dim]`. Only valid
    /// with `batch == 1`. Treated as constants.
    pub past: Option<(Tensor, Tensor)>,
}

impl AttentionSpec {
    pub fn past_len(&self) -> usize {
        self.past.as_ref().map_or(0, |(k, _)| k.shape()[1])
    }

    pub fn key_len(&self) -> usize {
        self.past_len() + self.seq
    }
}

#[derive(Debug)]
struct AttentionRecord {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    spec: AttentionSpec,
    /// `[batch, heads, seq, key_len]`
    probs: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    SoftmaxMasked(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        keep: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Attention(Box<AttentionRecord>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.slots.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = crate::numeric::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?.ensure_finite("add")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a `[d]` bias to every row of a `[n, d]` input.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.last_dim();
        if vb.len() != d {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?.ensure_finite("add_bias")?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?.ensure_finite("mul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?.ensure_finite("scale")?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Scale(a, s), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        let value = Tensor::scalar(s).ensure_finite("sum")?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let (rows, d) = dims2(vt, "gather")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape(
                    "gather",
                    format!("row {id} out of range for {rows} rows"),
                ));
            }
            data.extend_from_slice(vt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let d = vx.last_dim();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.len() != d || vb.len() != d {
            return Err(Error::shape("layer_norm", "affine parameters must match last dim"));
        }
        let rows = vx.num_rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?.ensure_finite("layer_norm")?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?.ensure_finite("gelu")?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gelu(x), rg))
    }

    /// Differentiable [`crate::numeric::softmax_masked`].
    pub fn softmax_masked(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let value = crate::numeric::tensor::softmax_masked(self.value(x), mask)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SoftmaxMasked(x), rg))
    }

    /// Mean token-level negative log-likelihood over rows where `keep` is set.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        keep: &[bool],
    ) -> Result<NodeId> {
        let vl = self.value(logits);
        let (rows, vocab) = dims2(vl, "cross_entropy")?;
        if targets.len() != rows || keep.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows, {} targets, {} flags", targets.len(), keep.len()),
            ));
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        let all = vec![true; vocab];
        for r in 0..rows {
            if !keep[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::TargetOutOfRange { id: t, vocab });
            }
            let row = vl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.copy_from_slice(row);
            softmax_row_in_place(p, &all);
        }
        let value = Tensor::scalar(total / count as f64).ensure_finite("cross_entropy")?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                keep: keep.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, heads * head_dim]` with head `h`
    /// occupying columns `h * head_dim ..`. Keys are ordered past-then-new.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec,
    ) -> Result<NodeId> {
        let AttentionSpec {
            batch,
            seq,
            heads,
            head_dim,
            ..
        } = spec;
        let width = heads * head_dim;
        for id in [q, k, v] {
            let s = self.value(id).shape();
            if s != [batch * seq, width] {
                return Err(Error::shape(
                    "attention",
                    format!("projection shape {s:?}, expected [{}, {width}]", batch * seq),
                ));
            }
        }
        let past = spec.past_len();
        if let Some((pk, pv)) = &spec.past {
            if batch != 1 {
                return Err(Error::shape("attention", "cached keys require batch 1"));
            }
            for t in [pk, pv] {
                if t.shape() != [heads, past, head_dim] {
                    return Err(Error::shape(
                        "attention",
                        format!("cache shape {:?}", t.shape()),
                    ));
                }
            }
        }
        let keys = past + seq;
        if spec.mask.len() != batch * seq * keys {
            return Err(Error::shape(
                "attention",
                format!("mask has {} cells, expected {}", spec.mask.len(), batch * seq * keys),
            ));
        }
        for (r, row) in spec.mask.chunks(keys).enumerate() {
            if !row.iter().any(|&m| m) {
                return Err(Error::FullyMaskedRow { row: r % seq });
            }
        }

        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut out = vec![0.0; batch * seq * width];
        let mut probs = vec![0.0; batch * heads * seq * keys];
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let mut kbuf = vec![0.0; keys * head_dim];
        let mut vbuf = vec![0.0; keys * head_dim];
        for b in 0..batch {
            for h in 0..heads {
                gather_head(&spec, vk.data(), spec.past.as_ref().map(|p| &p.0), b, h, &mut kbuf);
                gather_head(&spec, vv.data(), spec.past.as_ref().map(|p| &p.1), b, h, &mut vbuf);
                let qoff = b * seq * width + h * head_dim;
                let poff = (b * heads + h) * seq * keys;
                let p = &mut probs[poff..poff + seq * keys];
                // scores = q · kᵀ * scale
                gemm(
                    seq,
                    head_dim,
                    keys,
                    scale,
                    (&vq.data()[qoff..], width, 1),
                    (&kbuf, 1, head_dim),
                    0.0,
                    (p, keys, 1),
                );
                let moff = b * seq * keys;
                for (row, mrow) in p
                    .chunks_mut(keys)
                    .zip(spec.mask[moff..moff + seq * keys].chunks(keys))
                {
                    softmax_row_in_place(row, mrow);
                }
                gemm(
                    seq,
                    keys,
                    head_dim,
                    1.0,
                    (p, keys, 1),
                    (&vbuf, head_dim, 1),
                    0.0,
                    (&mut out[qoff..], width, 1),
                );
            }
        }
        let value = Tensor::new(vec![batch * seq, width], out)?.ensure_finite("attention")?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention(Box::new(AttentionRecord {
                q,
                k,
                v,
                spec,
                probs,
            })),
            rg,
        ))
    }

    /// Attention weights `[batch, heads, seq, key_len]` of an attention node.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention(rec) => Some(&rec.probs),
            _ => None,
        }
    }

    /// Reverse pass seeded with d(root)/d(root) = 1. `root` must be scalar.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", "root must be a scalar"));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        slots[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(grad) = slots[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &grad, &mut slots)?;
            }
            slots[idx] = Some(grad);
        }
        let slots = slots
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|g| Tensor::new(n.value.shape().to_vec(), g))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { slots })
    }

    fn propagate(&self, node: &Node, g: &[f64], slots: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a), "matmul")?;
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let da = slot(slots, *a, m * k);
                    // da += g · bᵀ
                    gemm(m, n, k, 1.0, (g, n, 1), (self.value(*b).data(), 1, n), 1.0, (da, k, 1));
                }
                if self.wants(*b) {
                    let db = slot(slots, *b, k * n);
                    // db += aᵀ · g
                    gemm(k, m, n, 1.0, (self.value(*a).data(), 1, k), (g, n, 1), 1.0, (db, n, 1));
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.wants(id) {
                        axpy(slot(slots, id, g.len()), g, 1.0);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    axpy(slot(slots, *x, g.len()), g, 1.0);
                }
                if self.wants(*bias) {
                    let d = self.value(*bias).len();
                    let db = slot(slots, *bias, d);
                    for row in g.chunks(d) {
                        axpy(db, row, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let da = slot(slots, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * vb[i];
                    }
                }
                if self.wants(*b) {
                    let db = slot(slots, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    axpy(slot(slots, *a, g.len()), g, *s);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    for v in slot(slots, *a, n).iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let vt = self.value(*table);
                    let d = vt.last_dim();
                    let dt = slot(slots, *table, vt.len());
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d], 1.0);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let vg = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let dg = slot(slots, *gamma, d);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if self.wants(*beta) {
                    let db = slot(slots, *beta, d);
                    for row in g.chunks(d) {
                        axpy(db, row, 1.0);
                    }
                }
                if self.wants(*x) {
                    let dx = slot(slots, *x, g.len());
                    let mut dh = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            dh[c] = grow[c] * vg[c];
                            mean_dh += dh[c];
                            mean_dh_h += dh[c] * hrow[c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for c in 0..d {
                            out[c] += rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let vx = self.value(*x).data();
                    let dx = slot(slots, *x, g.len());
                    for i in 0..g.len() {
                        let v = vx[i];
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        dx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }
            }
            Op::SoftmaxMasked(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let dx = slot(slots, *x, g.len());
                    for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dxr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                keep,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let vocab = self.value(*logits).last_dim();
                    let dl = slot(slots, *logits, probs.len());
                    let s = g[0] / *count as f64;
                    for r in 0..keep.len() {
                        if !keep[r] {
                            continue;
                        }
                        let row = &mut dl[r * vocab..(r + 1) * vocab];
                        axpy(row, &probs[r * vocab..(r + 1) * vocab], s);
                        row[targets[r]] -= s;
                    }
                }
            }
            Op::Attention(rec) => self.attention_backward(rec, g, slots),
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn attention_backward(&self, rec: &AttentionRecord, g: &[f64], slots: &mut [Option<Vec<f64>>]) {
        let spec = &rec.spec;
        let (batch, seq, heads, hd) = (spec.batch, spec.seq, spec.heads, spec.head_dim);
        let width = heads * hd;
        let past = spec.past_len();
        let keys = past + seq;
        let scale = 1.0 / (hd as f64).sqrt();
        let (vq, vk, vv) = (self.value(rec.q), self.value(rec.k), self.value(rec.v));
        let n = batch * seq * width;
        let mut dq = vec![0.0; n];
        let mut dk = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let mut kbuf = vec![0.0; keys * hd];
        let mut vbuf = vec![0.0; keys * hd];
        let mut dp = vec![0.0; seq * keys];
        let mut dkfull = vec![0.0; keys * hd];
        let mut dvfull = vec![0.0; keys * hd];
        for b in 0..batch {
            for h in 0..heads {
                gather_head(spec, vk.data(), spec.past.as_ref().map(|p| &p.0), b, h, &mut kbuf);
                gather_head(spec, vv.data(), spec.past.as_ref().map(|p| &p.1), b, h, &mut vbuf);
                let off = b * seq * width + h * hd;
                let poff = (b * heads + h) * seq * keys;
                let p = &rec.probs[poff..poff + seq * keys];
                // dP = dO · Vᵀ
                gemm(seq, hd, keys, 1.0, (&g[off..], width, 1), (&vbuf, 1, hd), 0.0, (&mut dp, keys, 1));
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the logit scale
                for (dpr, pr) in dp.chunks_mut(keys).zip(p.chunks(keys)) {
                    let dot: f64 = dpr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for c in 0..keys {
                        dpr[c] = pr[c] * (dpr[c] - dot) * scale;
                    }
                }
                // dQ = dS · K
                gemm(seq, keys, hd, 1.0, (&dp, keys, 1), (&kbuf, hd, 1), 1.0, (&mut dq[off..], width, 1));
                // dK = dSᵀ · Q
                gemm(keys, seq, hd, 1.0, (&dp, 1, keys), (&vq.data()[off..], width, 1), 0.0, (&mut dkfull, hd, 1));
                // dV = Pᵀ · dO
                gemm(keys, seq, hd, 1.0, (p, 1, keys), (&g[off..], width, 1), 0.0, (&mut dvfull, hd, 1));
                for t in 0..seq {
                    let dst = b * seq * width + t * width + h * hd;
                    let src = (past + t) * hd;
                    dk[dst..dst + hd].copy_from_slice(&dkfull[src..src + hd]);
                    dv[dst..dst + hd].copy_from_slice(&dvfull[src..src + hd]);
                }
            }
        }
        for (id, d) in [(rec.q, dq), (rec.k, dk), (rec.v, dv)] {
            if self.wants(id) {
                axpy(slot(slots, id, n), &d, 1.0);
            }
        }
    }
}

/// Copies one head's keys (or values) for batch item `b` into a contiguous
/// `[past + seq, head_dim]` buffer, cached rows first.
fn gather_head(
    spec: &AttentionSpec,
    fresh: &[f64],
    past: Option<&Tensor>,
    b: usize,
    h: usize,
    buf: &mut [f64],
) {
    let hd = spec.head_dim;
    let width = spec.heads * hd;
    let p = spec.past_len();
    if let Some(past) = past {
        let src = &past.data()[h * p * hd..(h + 1) * p * hd];
        buf[..p * hd].copy_from_slice(src);
    }
    for t in 0..spec.seq {
        let src = b * spec.seq * width + t * width + h * hd;
        buf[(p + t) * hd..(p + t + 1) * hd].copy_from_slice(&fresh[src..src + hd]);
    }
}

fn slot(slots: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    slots[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

