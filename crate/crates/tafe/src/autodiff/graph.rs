//! The differentiation tape.
//!
//! A [`Graph`] is an append-only list of nodes; each node stores the op that
//! produced it, the ids of its inputs (always earlier nodes, so the tape is
//! acyclic by construction), the forward value, and whatever activations the
//! backward rule needs. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every node that transitively depends on a
//! parameter leaf. The tape is rebuilt for every training step.
//!
//! Every backward rule is deterministic: reductions run in one fixed order,
//! and the only parallelism (inside the convolution rules) splits work over
//! disjoint output regions.

use crate::error::{Result, TafeError};
use crate::pyramid::{extract_layer, scatter_layer, PyramidGeometry};
use crate::tensor::{
    self, conv2d_raw, gelu_grad_scalar, max_threads, Padding, Tensor,
};

/// Handle to one node in a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
        padding: Padding,
        stride: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// `a (n,..) + b (1,..)`, broadcasting `b` over the batch dimension.
    AddBatchBroadcast {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        s: f64,
    },
    Relu {
        x: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    },
    Upsample {
        x: NodeId,
    },
    FlattenLayers {
        inputs: Vec<NodeId>,
        geometry: PyramidGeometry,
    },
    ExtractLayer {
        tokens: NodeId,
        geometry: PyramidGeometry,
        layer: usize,
    },
    CeLoss {
        logits: NodeId,
        mask: Vec<u8>,
        /// One weight per class id; uniform weights recover the plain
        /// per-pixel mean.
        weights: Vec<f64>,
    },
    Sum {
        x: NodeId,
    },
    /// Negative-control fixture: forward is `x * s` but the backward rule is
    /// deliberately wrong, so any gradient check through it must fail.
    CorruptedScale {
        x: NodeId,
        s: f64,
    },
}

/// Activations saved at forward time for the backward rules that need more
/// than their inputs' values.
#[derive(Clone, Debug)]
enum Saved {
    None,
    /// Per-token `(mean, 1/sqrt(var+eps))`, one pair per `(n, h, w)` site.
    LayerNorm { mean: Vec<f64>, inv_std: Vec<f64> },
    /// Softmax attention weights, laid out `(n, heads, T, T)` row-major.
    Attention { attn: Vec<f64> },
    /// Softmax probabilities of the logits, same shape as the logits.
    CeLoss { probs: Tensor },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    saved: Saved,
    needs_grad: bool,
}

/// Tape-based reverse-mode differentiation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// LayerNorm variance guard. Small enough not to disturb unit-variance
/// tokens, large enough to keep gradients finite on constant tokens.
pub const LAYERNORM_EPS: f64 = 1e-5;

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

    fn push(&mut self, op: Op, value: Tensor, saved: Saved, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            saved,
            needs_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// The forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.node(id).value
    }

    /// The accumulated gradient of a node, if backward has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Clears all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Trainable leaf: gradients will be accumulated for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, Saved::None, true)
    }

    /// Constant leaf: treated as data, no gradient tracked.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, Saved::None, false)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.node(*id).needs_grad)
    }

    /// 2-D cross-correlation. `weights` is a `(c_out,c_in,kh,kw)` node with
    /// odd extents; `bias` is an optional `(1,c_out,1,1)` node.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
        padding: Padding,
        stride: usize,
    ) -> Result<NodeId> {
        if let Some(b) = bias {
            let (bn, bc, bh, bw) = self.value(b).shape();
            let c_out = self.value(weights).n();
            if (bn, bc, bh, bw) != (1, c_out, 1, 1) {
                return Err(TafeError::Shape(format!(
                    "conv bias node must be (1,{c_out},1,1), got ({bn},{bc},{bh},{bw})"
                )));
            }
        }
        let value = conv2d_raw(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b).data()),
            padding,
            stride,
        )?;
        let mut ids = vec![input, weights];
        ids.extend(bias);
        let needs = self.needs(&ids);
        Ok(self.push(
            Op::Conv2d {
                input,
                weights,
                bias,
                padding,
                stride,
            },
            value,
            Saved::None,
            needs,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::add(self.value(a), self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Add { a, b }, value, Saved::None, needs))
    }

    /// `a + b` where `b` has batch size 1 and is broadcast over `a`'s batch.
    pub fn add_batch_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(a).shape();
        let bs = self.value(b).shape();
        if bs != (1, c, h, w) {
            return Err(TafeError::Shape(format!(
                "broadcast add needs (1,{c},{h},{w}), got {bs:?}"
            )));
        }
        let a_data = self.value(a).data();
        let b_data = self.value(b).data();
        let plane = c * h * w;
        let mut out = Vec::with_capacity(n * plane);
        for bn in 0..n {
            out.extend(
                a_data[bn * plane..(bn + 1) * plane]
                    .iter()
                    .zip(b_data.iter())
                    .map(|(x, y)| x + y),
            );
        }
        let value = Tensor::from_parts(n, c, h, w, out);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::AddBatchBroadcast { a, b }, value, Saved::None, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, value, Saved::None, needs))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let value = tensor::scale(self.value(x), s);
        let needs = self.needs(&[x]);
        self.push(Op::Scale { x, s }, value, Saved::None, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = tensor::relu(self.value(x));
        let needs = self.needs(&[x]);
        self.push(Op::Relu { x }, value, Saved::None, needs)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = tensor::gelu(self.value(x));
        let needs = self.needs(&[x]);
        self.push(Op::Gelu { x }, value, Saved::None, needs)
    }

    /// Per-token layer normalization over channels; `gamma` and `beta` are
    /// `(1,c,1,1)` nodes.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).shape();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != (1, c, 1, 1) {
                return Err(TafeError::Shape(format!(
                    "layernorm {name} must be (1,{c},1,1), got {:?}",
                    self.value(id).shape()
                )));
            }
        }
        let data = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let hw = h * w;
        let sites = n * hw;
        let mut mean = vec![0.0; sites];
        let mut inv_std = vec![0.0; sites];
        let mut out = vec![0.0; data.len()];
        for bn in 0..n {
            for s in 0..hw {
                let site = bn * hw + s;
                let mut m = 0.0;
                for ch in 0..c {
                    m += data[(bn * c + ch) * hw + s];
                }
                m /= c as f64;
                let mut var = 0.0;
                for ch in 0..c {
                    let d = data[(bn * c + ch) * hw + s] - m;
                    var += d * d;
                }
                var /= c as f64;
                let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                mean[site] = m;
                inv_std[site] = inv;
                for ch in 0..c {
                    let i = (bn * c + ch) * hw + s;
                    out[i] = g[ch] * ((data[i] - m) * inv) + b[ch];
                }
            }
        }
        let value = Tensor::from_parts(n, c, h, w, out);
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta },
            value,
            Saved::LayerNorm { mean, inv_std },
            needs,
        ))
    }

    /// Multi-head scaled dot-product self-attention over a token tensor
    /// `(n, d, T, 1)`: per head, `softmax(QᵀK/√(d/heads))` applied to `V`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (n, d, t, one) = self.value(q).shape();
        if one != 1 {
            return Err(TafeError::Shape(format!(
                "attention expects (n,d,T,1) tokens, got {:?}",
                self.value(q).shape()
            )));
        }
        if self.value(k).shape() != (n, d, t, 1) || self.value(v).shape() != (n, d, t, 1) {
            return Err(TafeError::Shape(
                "attention q/k/v shapes must match".into(),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TafeError::Config(format!(
                "token width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut attn = vec![0.0; n * heads * t * t];
        let mut out = vec![0.0; n * d * t];
        for bn in 0..n {
            for hd in 0..heads {
                let ch0 = hd * dh;
                let a_base = (bn * heads + hd) * t * t;
                // scores, then softmax per query row
                for i in 0..t {
                    let row = &mut attn[a_base + i * t..a_base + (i + 1) * t];
                    for (j, slot) in row.iter_mut().enumerate() {
                        let mut dot = 0.0;
                        for c in 0..dh {
                            let q_i = qd[(bn * d + ch0 + c) * t + i];
                            let k_j = kd[(bn * d + ch0 + c) * t + j];
                            dot += q_i * k_j;
                        }
                        *slot = dot * scale;
                    }
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - m).exp();
                        sum += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= sum;
                    }
                }
                // weighted value sum
                for c in 0..dh {
                    let v_row = &vd[(bn * d + ch0 + c) * t..(bn * d + ch0 + c + 1) * t];
                    let o_row = &mut out[(bn * d + ch0 + c) * t..(bn * d + ch0 + c + 1) * t];
                    for i in 0..t {
                        let a_row = &attn[a_base + i * t..a_base + (i + 1) * t];
                        let mut acc = 0.0;
                        for j in 0..t {
                            acc += a_row[j] * v_row[j];
                        }
                        o_row[i] = acc;
                    }
                }
            }
        }
        let value = Tensor::from_parts(n, d, t, 1, out);
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(
            Op::Attention { q, k, v, heads },
            value,
            Saved::Attention { attn },
            needs,
        ))
    }

    /// Align-corners bilinear upsampling to `(out_h, out_w)`.
    pub fn upsample_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let value = tensor::upsample_bilinear(self.value(x), out_h, out_w)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Upsample { x }, value, Saved::None, needs))
    }

    /// Flattens a stack of feature-map nodes into one `(n, d, T, 1)` token
    /// node using the column-major layer layout.
    pub fn flatten_layers(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let layers: Vec<Tensor> = inputs.iter().map(|id| self.value(*id).clone()).collect();
        let seq = crate::pyramid::flatten_layers(&layers)?;
        let needs = self.needs(inputs);
        Ok(self.push(
            Op::FlattenLayers {
                inputs: inputs.to_vec(),
                geometry: seq.geometry,
            },
            seq.tokens,
            Saved::None,
            needs,
        ))
    }

    /// Reads layer `layer` of `geometry` back out of a token node.
    pub fn extract_layer(
        &mut self,
        tokens: NodeId,
        geometry: &PyramidGeometry,
        layer: usize,
    ) -> Result<NodeId> {
        let value = extract_layer(self.value(tokens), geometry, layer)?;
        let needs = self.needs(&[tokens]);
        Ok(self.push(
            Op::ExtractLayer {
                tokens,
                geometry: geometry.clone(),
                layer,
            },
            value,
            Saved::None,
            needs,
        ))
    }

    /// Mean per-pixel softmax cross-entropy of logits `(n,K,H,W)` against a
    /// mask of `n·H·W` class ids (row-major, batch-major).
    pub fn ce_loss(&mut self, logits: NodeId, mask: &[u8]) -> Result<NodeId> {
        let k = self.value(logits).c();
        self.ce_loss_weighted(logits, mask, &vec![1.0; k])
    }

    /// Class-weighted softmax cross-entropy: each pixel's term is scaled by
    /// its true class's weight and the sum is normalized by the total
    /// applied weight, so uniform weights reproduce [`Graph::ce_loss`] and
    /// rescaling all weights by one constant changes nothing.
    pub fn ce_loss_weighted(
        &mut self,
        logits: NodeId,
        mask: &[u8],
        class_weights: &[f64],
    ) -> Result<NodeId> {
        let (n, k, h, w) = self.value(logits).shape();
        if mask.len() != n * h * w {
            return Err(TafeError::Shape(format!(
                "mask length {} does not match {n}x{h}x{w} pixels",
                mask.len()
            )));
        }
        if let Some(bad) = mask.iter().find(|m| **m as usize >= k) {
            return Err(TafeError::Data(format!(
                "mask class id {bad} out of range for {k} classes"
            )));
        }
        if class_weights.len() != k {
            return Err(TafeError::Shape(format!(
                "{} class weights for {k} classes",
                class_weights.len()
            )));
        }
        if class_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TafeError::Data(
                "class weights must be finite and nonnegative".into(),
            ));
        }
        let data = self.value(logits).data();
        let hw = h * w;
        let mut probs = vec![0.0; data.len()];
        let mut total = 0.0;
        let mut weight_sum = 0.0;
        for bn in 0..n {
            for s in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..k {
                    m = m.max(data[(bn * k + ch) * hw + s]);
                }
                let mut sum = 0.0;
                for ch in 0..k {
                    let e = (data[(bn * k + ch) * hw + s] - m).exp();
                    probs[(bn * k + ch) * hw + s] = e;
                    sum += e;
                }
                let lse = m + sum.ln();
                for ch in 0..k {
                    probs[(bn * k + ch) * hw + s] /= sum;
                }
                let target = mask[bn * hw + s] as usize;
                let weight = class_weights[target];
                total += weight * (lse - data[(bn * k + target) * hw + s]);
                weight_sum += weight;
            }
        }
        if weight_sum <= 0.0 {
            return Err(TafeError::Data(
                "all mask pixels carry zero class weight".into(),
            ));
        }
        let value = Tensor::scalar(total / weight_sum);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Op::CeLoss {
                logits,
                mask: mask.to_vec(),
                weights: class_weights.to_vec(),
            },
            value,
            Saved::CeLoss {
                probs: Tensor::from_parts(n, k, h, w, probs),
            },
            needs,
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Op::Sum { x }, Tensor::scalar(total), Saved::None, needs)
    }

    /// Negative-control fixture: forward `x * s`, backward intentionally
    /// scaled wrong so gradient checks through it must fail.
    pub fn corrupted_scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let value = tensor::scale(self.value(x), s);
        let needs = self.needs(&[x]);
        self.push(Op::CorruptedScale { x, s }, value, Saved::None, needs)
    }

    /// Reverse pass from a scalar loss node. Gradients accumulate across
    /// calls until [`Graph::zero_grads`]; every parameter leaf reachable
    /// from the loss ends up with a gradient of its own shape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TafeError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.node(loss).needs_grad {
            return Err(TafeError::Usage(
                "loss does not depend on any parameter leaf".into(),
            ));
        }
        let mut flow: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        flow[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = flow[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut flow)?;
            accumulate(&mut self.grads[i], &g);
        }
        // A reachable parameter whose path was cut by value-dependent
        // sparsity still gets an explicit zero gradient.
        self.fill_missing_leaf_grads(loss);
        Ok(())
    }

    fn fill_missing_leaf_grads(&mut self, loss: NodeId) {
        let mut reachable = vec![false; self.nodes.len()];
        reachable[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !reachable[i] {
                continue;
            }
            for input in op_inputs(&self.nodes[i].op) {
                reachable[input.0] = true;
            }
        }
        for i in 0..self.nodes.len() {
            let node = &self.nodes[i];
            if reachable[i]
                && node.needs_grad
                && matches!(node.op, Op::Leaf)
                && self.grads[i].is_none()
            {
                let (n, c, h, w) = node.value.shape();
                self.grads[i] = Some(Tensor::zeros(n, c, h, w));
            }
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, flow: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weights,
                bias,
                padding,
                stride,
            } => {
                let in_t = self.value(*input);
                let w_t = self.value(*weights);
                if self.node(*input).needs_grad {
                    let d_in = conv2d_backward_input(g, w_t, in_t.shape(), *padding, *stride);
                    accumulate(&mut flow[input.0], &d_in);
                }
                if self.node(*weights).needs_grad {
                    let d_w = conv2d_backward_weights(g, in_t, w_t.shape(), *padding, *stride);
                    accumulate(&mut flow[weights.0], &d_w);
                }
                if let Some(b) = bias {
                    if self.node(*b).needs_grad {
                        accumulate(&mut flow[b.0], &conv2d_backward_bias(g));
                    }
                }
            }
            Op::Add { a, b } => {
                if self.node(*a).needs_grad {
                    accumulate(&mut flow[a.0], g);
                }
                if self.node(*b).needs_grad {
                    accumulate(&mut flow[b.0], g);
                }
            }
            Op::AddBatchBroadcast { a, b } => {
                if self.node(*a).needs_grad {
                    accumulate(&mut flow[a.0], g);
                }
                if self.node(*b).needs_grad {
                    let (n, c, h, w) = g.shape();
                    let plane = c * h * w;
                    let mut summed = vec![0.0; plane];
                    let gd = g.data();
                    for bn in 0..n {
                        for (s, slot) in summed.iter_mut().enumerate() {
                            *slot += gd[bn * plane + s];
                        }
                    }
                    accumulate(&mut flow[b.0], &Tensor::from_parts(1, c, h, w, summed));
                }
            }
            Op::Mul { a, b } => {
                if self.node(*a).needs_grad {
                    accumulate(&mut flow[a.0], &tensor::mul(g, self.value(*b))?);
                }
                if self.node(*b).needs_grad {
                    accumulate(&mut flow[b.0], &tensor::mul(g, self.value(*a))?);
                }
            }
            Op::Scale { x, s } => {
                if self.node(*x).needs_grad {
                    accumulate(&mut flow[x.0], &tensor::scale(g, *s));
                }
            }
            Op::CorruptedScale { x, s } => {
                if self.node(*x).needs_grad {
                    // wrong on purpose: uses s + 1/2 instead of s
                    accumulate(&mut flow[x.0], &tensor::scale(g, *s + 0.5));
                }
            }
            Op::Relu { x } => {
                if self.node(*x).needs_grad {
                    let xd = self.value(*x).data();
                    let (n, c, h, w) = g.shape();
                    let data = g
                        .data()
                        .iter()
                        .zip(xd.iter())
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut flow[x.0], &Tensor::from_parts(n, c, h, w, data));
                }
            }
            Op::Gelu { x } => {
                if self.node(*x).needs_grad {
                    let xd = self.value(*x).data();
                    let (n, c, h, w) = g.shape();
                    let data = g
                        .data()
                        .iter()
                        .zip(xd.iter())
                        .map(|(gi, xi)| gi * gelu_grad_scalar(*xi))
                        .collect();
                    accumulate(&mut flow[x.0], &Tensor::from_parts(n, c, h, w, data));
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let Saved::LayerNorm { mean, inv_std } = &node.saved else {
                    unreachable!("layernorm node always saves statistics");
                };
                self.layernorm_backward(g, *x, *gamma, *beta, mean, inv_std, flow)?;
            }
            Op::Attention { q, k, v, heads } => {
                let Saved::Attention { attn } = &node.saved else {
                    unreachable!("attention node always saves weights");
                };
                self.attention_backward(g, *q, *k, *v, *heads, attn, flow)?;
            }
            Op::Upsample { x } => {
                if self.node(*x).needs_grad {
                    let (h, w) = {
                        let t = self.value(*x);
                        (t.h(), t.w())
                    };
                    accumulate(&mut flow[x.0], &upsample_backward(g, h, w));
                }
            }
            Op::FlattenLayers { inputs, geometry } => {
                for (l, input) in inputs.iter().enumerate() {
                    if self.node(*input).needs_grad {
                        accumulate(&mut flow[input.0], &extract_layer(g, geometry, l)?);
                    }
                }
            }
            Op::ExtractLayer {
                tokens,
                geometry,
                layer,
            } => {
                if self.node(*tokens).needs_grad {
                    let (n, d, _, _) = g.shape();
                    let mut scattered = Tensor::zeros(n, d, geometry.total_tokens(), 1);
                    scatter_layer(g, geometry, *layer, &mut scattered)?;
                    accumulate(&mut flow[tokens.0], &scattered);
                }
            }
            Op::CeLoss {
                logits,
                mask,
                weights,
            } => {
                if self.node(*logits).needs_grad {
                    let Saved::CeLoss { probs } = &node.saved else {
                        unreachable!("ce node always saves probabilities");
                    };
                    let (n, k, h, w) = probs.shape();
                    let hw = h * w;
                    let weight_sum: f64 = (0..n * hw).map(|i| weights[mask[i] as usize]).sum();
                    let gs = g.data()[0] / weight_sum;
                    let mut d = probs.data().to_vec();
                    for bn in 0..n {
                        for s in 0..hw {
                            let target = mask[bn * hw + s] as usize;
                            d[(bn * k + target) * hw + s] -= 1.0;
                            let scale = gs * weights[target];
                            for ch in 0..k {
                                d[(bn * k + ch) * hw + s] *= scale;
                            }
                        }
                    }
                    accumulate(&mut flow[logits.0], &Tensor::from_parts(n, k, h, w, d));
                }
            }
            Op::Sum { x } => {
                if self.node(*x).needs_grad {
                    let (n, c, h, w) = self.value(*x).shape();
                    accumulate(
                        &mut flow[x.0],
                        &Tensor::filled(n, c, h, w, g.data()[0]),
                    );
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn layernorm_backward(
        &self,
        g: &Tensor,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        inv_std: &[f64],
        flow: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.shape();
        let hw = h * w;
        let xd = xt.data();
        let gd = g.data();
        let gam = self.value(gamma).data();
        let mut d_x = vec![0.0; xd.len()];
        let mut d_gamma = vec![0.0; c];
        let mut d_beta = vec![0.0; c];
        for bn in 0..n {
            for s in 0..hw {
                let site = bn * hw + s;
                let (m, inv) = (mean[site], inv_std[site]);
                // two reductions over channels, then the pointwise rule
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for ch in 0..c {
                    let i = (bn * c + ch) * hw + s;
                    let xh = (xd[i] - m) * inv;
                    let dy = gd[i];
                    d_beta[ch] += dy;
                    d_gamma[ch] += dy * xh;
                    let dxh = dy * gam[ch];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
                let cf = c as f64;
                for ch in 0..c {
                    let i = (bn * c + ch) * hw + s;
                    let xh = (xd[i] - m) * inv;
                    let dxh = gd[i] * gam[ch];
                    d_x[i] = inv * (dxh - sum_dxh / cf - xh * sum_dxh_xh / cf);
                }
            }
        }
        if self.node(x).needs_grad {
            accumulate(&mut flow[x.0], &Tensor::from_parts(n, c, h, w, d_x));
        }
        if self.node(gamma).needs_grad {
            accumulate(&mut flow[gamma.0], &Tensor::from_parts(1, c, 1, 1, d_gamma));
        }
        if self.node(beta).needs_grad {
            accumulate(&mut flow[beta.0], &Tensor::from_parts(1, c, 1, 1, d_beta));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        attn: &[f64],
        flow: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (n, d, t, _) = g.shape();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let gd = g.data();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut d_q = vec![0.0; qd.len()];
        let mut d_k = vec![0.0; kd.len()];
        let mut d_v = vec![0.0; vd.len()];
        let mut d_s = vec![0.0; t * t];
        for bn in 0..n {
            for hd in 0..heads {
                let ch0 = hd * dh;
                let a_base = (bn * heads + hd) * t * t;
                // dV[c,j] = sum_i A[i,j] * g[c,i]
                for c in 0..dh {
                    let row = bn * d + ch0 + c;
                    for j in 0..t {
                        let mut acc = 0.0;
                        for i in 0..t {
                            acc += attn[a_base + i * t + j] * gd[row * t + i];
                        }
                        d_v[row * t + j] += acc;
                    }
                }
                // dS through the softmax rows
                for i in 0..t {
                    let a_row = &attn[a_base + i * t..a_base + (i + 1) * t];
                    let s_row = &mut d_s[i * t..(i + 1) * t];
                    // dA[i,j] = sum_c g[c,i] * V[c,j]
                    for (j, slot) in s_row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for c in 0..dh {
                            let row = bn * d + ch0 + c;
                            acc += gd[row * t + i] * vd[row * t + j];
                        }
                        *slot = acc;
                    }
                    let dot: f64 = s_row
                        .iter()
                        .zip(a_row.iter())
                        .map(|(da, a)| da * a)
                        .sum();
                    for (slot, a) in s_row.iter_mut().zip(a_row.iter()) {
                        *slot = a * (*slot - dot);
                    }
                }
                // dQ[c,i] = scale * sum_j dS[i,j] K[c,j]
                // dK[c,j] = scale * sum_i dS[i,j] Q[c,i]
                for c in 0..dh {
                    let row = bn * d + ch0 + c;
                    for i in 0..t {
                        let mut acc = 0.0;
                        for j in 0..t {
                            acc += d_s[i * t + j] * kd[row * t + j];
                        }
                        d_q[row * t + i] += acc * scale;
                    }
                    for j in 0..t {
                        let mut acc = 0.0;
                        for i in 0..t {
                            acc += d_s[i * t + j] * qd[row * t + i];
                        }
                        d_k[row * t + j] += acc * scale;
                    }
                }
            }
        }
        if self.node(q).needs_grad {
            accumulate(&mut flow[q.0], &Tensor::from_parts(n, d, t, 1, d_q));
        }
        if self.node(k).needs_grad {
            accumulate(&mut flow[k.0], &Tensor::from_parts(n, d, t, 1, d_k));
        }
        if self.node(v).needs_grad {
            accumulate(&mut flow[v.0], &Tensor::from_parts(n, d, t, 1, d_v));
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d {
            input,
            weights,
            bias,
            ..
        } => {
            let mut v = vec![*input, *weights];
            v.extend(*bias);
            v
        }
        Op::Add { a, b } | Op::AddBatchBroadcast { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::Scale { x, .. }
        | Op::CorruptedScale { x, .. }
        | Op::Relu { x }
        | Op::Gelu { x }
        | Op::Upsample { x }
        | Op::Sum { x } => vec![*x],
        Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::FlattenLayers { inputs, .. } => inputs.clone(),
        Op::ExtractLayer { tokens, .. } => vec![*tokens],
        Op::CeLoss { logits, .. } => vec![*logits],
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: &Tensor) {
    match slot {
        Some(t) => {
            debug_assert!(t.same_shape(delta), "gradient shape drift");
            let d = delta.data();
            for (a, b) in t.data_mut().iter_mut().zip(d.iter()) {
                *a += b;
            }
        }
        None => *slot = Some(delta.clone()),
    }
}

fn conv_pads(padding: Padding, kh: usize, kw: usize) -> (usize, usize) {
    match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
        Padding::Valid => (0, 0),
    }
}

/// Gradient w.r.t. the convolution input: scatters each output gradient
/// through the kernel taps it was produced by. Parallel over batch samples
/// (disjoint output planes), fixed order inside each sample.
fn conv2d_backward_input(
    g: &Tensor,
    weights: &Tensor,
    in_shape: (usize, usize, usize, usize),
    padding: Padding,
    stride: usize,
) -> Tensor {
    let (n, c_in, h, w) = in_shape;
    let (c_out, _, kh, kw) = weights.shape();
    let (_, _, oh, ow) = g.shape();
    let (ph, pw) = conv_pads(padding, kh, kw);
    let gd = g.data();
    let wd = weights.data();
    let mut out = vec![0.0; n * c_in * h * w];

    let per_sample = |bn: usize, d_in: &mut [f64]| {
        for oc in 0..c_out {
            let g_plane = &gd[(bn * c_out + oc) * oh * ow..(bn * c_out + oc + 1) * oh * ow];
            for ic in 0..c_in {
                let w_base = (oc * c_in + ic) * kh * kw;
                let d_chan = &mut d_in[ic * h * w..(ic + 1) * h * w];
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let wv = wd[w_base + dkh * kw + dkw];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + dkh) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let d_row = &mut d_chan[iy as usize * w..(iy as usize + 1) * w];
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            for ox in 0..ow {
                                let ix = (ox * stride + dkw) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    d_row[ix as usize] += wv * g_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    run_chunked(&mut out, c_in * h * w, n, per_sample);
    Tensor::from_parts(n, c_in, h, w, out)
}

/// Gradient w.r.t. the convolution weights. Parallel over output channels
/// (each owns a disjoint weight slab), reduction order fixed as
/// `(batch, oy, ox)`.
fn conv2d_backward_weights(
    g: &Tensor,
    input: &Tensor,
    w_shape: (usize, usize, usize, usize),
    padding: Padding,
    stride: usize,
) -> Tensor {
    let (c_out, c_in, kh, kw) = w_shape;
    let (n, _, h, w) = input.shape();
    let (_, _, oh, ow) = g.shape();
    let (ph, pw) = conv_pads(padding, kh, kw);
    let gd = g.data();
    let ind = input.data();
    let mut out = vec![0.0; c_out * c_in * kh * kw];

    let per_oc = |oc: usize, d_w: &mut [f64]| {
        for ic in 0..c_in {
            for dkh in 0..kh {
                for dkw in 0..kw {
                    let mut acc = 0.0;
                    for bn in 0..n {
                        let g_plane =
                            &gd[(bn * c_out + oc) * oh * ow..(bn * c_out + oc + 1) * oh * ow];
                        let in_chan = &ind[(bn * c_in + ic) * h * w..(bn * c_in + ic + 1) * h * w];
                        for oy in 0..oh {
                            let iy = (oy * stride + dkh) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = &in_chan[iy as usize * w..(iy as usize + 1) * w];
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            for ox in 0..ow {
                                let ix = (ox * stride + dkw) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    acc += g_row[ox] * in_row[ix as usize];
                                }
                            }
                        }
                    }
                    d_w[(ic * kh + dkh) * kw + dkw] = acc;
                }
            }
        }
    };

    run_chunked(&mut out, c_in * kh * kw, c_out, per_oc);
    Tensor::from_parts(c_out, c_in, kh, kw, out)
}

/// Gradient w.r.t. the per-channel bias: sum of the output gradient over
/// batch and space.
fn conv2d_backward_bias(g: &Tensor) -> Tensor {
    let (n, c_out, oh, ow) = g.shape();
    let gd = g.data();
    let mut out = vec![0.0; c_out];
    for bn in 0..n {
        for (oc, slot) in out.iter_mut().enumerate() {
            let plane = &gd[(bn * c_out + oc) * oh * ow..(bn * c_out + oc + 1) * oh * ow];
            for v in plane {
                *slot += v;
            }
        }
    }
    Tensor::from_parts(1, c_out, 1, 1, out)
}

/// Splits `out` into `tasks` equal chunks of `chunk` elements and runs
/// `work(task_index, chunk)` for each, spreading tasks over the configured
/// worker threads. Chunks are disjoint, so any schedule gives identical
/// results.
fn run_chunked(out: &mut [f64], chunk: usize, tasks: usize, work: impl Fn(usize, &mut [f64]) + Sync) {
    let threads = max_threads().min(tasks);
    if threads <= 1 {
        for (i, c) in out.chunks_mut(chunk).enumerate() {
            work(i, c);
        }
        return;
    }
    let per = tasks.div_ceil(threads);
    std::thread::scope(|scope| {
        let work = &work;
        let mut rest = out;
        let mut task = 0usize;
        while !rest.is_empty() {
            let take = per.min(rest.len() / chunk);
            let (head, tail) = rest.split_at_mut(take * chunk);
            let first = task;
            scope.spawn(move || {
                for (i, c) in head.chunks_mut(chunk).enumerate() {
                    work(first + i, c);
                }
            });
            task += take;
            rest = tail;
        }
    });
}

/// Adjoint of align-corners bilinear upsampling: each output gradient is
/// distributed to the up-to-four source corners with the interpolation
/// weights.
fn upsample_backward(g: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (n, c, oh, ow) = g.shape();
    let gd = g.data();
    let mut out = vec![0.0; n * c * in_h * in_w];
    let coords = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        if src_len == 1 || dst_len == 1 {
            return (0, 0, 0.0);
        }
        let pos = dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    for plane in 0..n * c {
        let src = &mut out[plane * in_h * in_w..(plane + 1) * in_h * in_w];
        let gp = &gd[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = coords(oy, in_h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = coords(ox, in_w, ow);
                let gv = gp[oy * ow + ox];
                src[y0 * in_w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                src[y0 * in_w + x1] += gv * (1.0 - fy) * fx;
                src[y1 * in_w + x0] += gv * fy * (1.0 - fx);
                src[y1 * in_w + x1] += gv * fy * fx;
            }
        }
    }
    Tensor::from_parts(n, c, in_h, in_w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid;

    #[test]
    fn quadratic_gradient_is_two_x() {
        // loss = sum(x * x) at x = [3] -> grad [6]
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn product_rule_swaps_operands() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(1, 1, 1, 2, vec![2.0, -1.0]).unwrap());
        let y = g.param(Tensor::new(1, 1, 1, 2, vec![5.0, 4.0]).unwrap());
        let prod = g.mul(x, y).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[5.0, 4.0]);
        assert_eq!(g.grad(y).unwrap().data(), &[2.0, -1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(1, 1, 1, 2));
        assert!(matches!(g.backward(x), Err(TafeError::Usage(_))));
    }

    #[test]
    fn loss_must_touch_a_parameter() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.0));
        let loss = g.sum(x);
        assert!(matches!(g.backward(loss), Err(TafeError::Usage(_))));
    }

    #[test]
    fn one_by_one_conv_weight_gradient_is_input_sum() {
        // out = w * in elementwise over space; d loss/d w = sum(in)
        let mut g = Graph::new();
        let input = g.input(Tensor::new(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.param(Tensor::new(1, 1, 1, 1, vec![0.5]).unwrap());
        let out = g.conv2d(input, w, None, Padding::Same, 1).unwrap();
        let loss = g.sum(out);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[10.0]);
    }

    #[test]
    fn conv_bias_gradient_counts_output_pixels() {
        let mut g = Graph::new();
        let input = g.input(Tensor::zeros(2, 1, 3, 3));
        let w = g.param(Tensor::zeros(1, 1, 1, 1));
        let b = g.param(Tensor::zeros(1, 1, 1, 1));
        let out = g.conv2d(input, w, Some(b), Padding::Same, 1).unwrap();
        let loss = g.sum(out);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[18.0]);
    }

    #[test]
    fn relu_blocks_gradient_on_negative_side() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(1, 1, 1, 3, vec![-2.0, 1.0, 3.0]).unwrap());
        let r = g.relu(x);
        let loss = g.sum(r);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn flatten_adjoint_is_the_inverse_permutation() {
        // loss = sum(flatten(L) .* c): grad wrt L must be unflatten(c)
        let mut g = Graph::new();
        let layer_a = g.param(Tensor::new(1, 1, 2, 2, vec![0.0; 4]).unwrap());
        let layer_b = g.param(Tensor::new(1, 1, 1, 1, vec![0.0]).unwrap());
        let tokens = g.flatten_layers(&[layer_a, layer_b]).unwrap();
        let weights = g.input(Tensor::new(1, 1, 5, 1, vec![10.0, 20.0, 30.0, 40.0, 50.0]).unwrap());
        let weighted = g.mul(tokens, weights).unwrap();
        let loss = g.sum(weighted);
        g.backward(loss).unwrap();
        // tokens of layer_a are [a(0,0), a(1,0), a(0,1), a(1,1)] -> weights 10,20,30,40
        assert_eq!(g.grad(layer_a).unwrap().data(), &[10.0, 30.0, 20.0, 40.0]);
        assert_eq!(g.grad(layer_b).unwrap().data(), &[50.0]);
    }

    #[test]
    fn extract_layer_routes_gradient_into_its_token_block() {
        let geometry = pyramid::PyramidGeometry::new(&[(2, 2), (1, 1)]).unwrap();
        let mut g = Graph::new();
        let tokens = g.param(Tensor::new(1, 1, 5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let layer1 = g.extract_layer(tokens, &geometry, 1).unwrap();
        assert_eq!(g.value(layer1).data(), &[5.0]);
        let loss = g.sum(layer1);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(tokens).unwrap().data(), &[0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn attention_with_uniform_values_is_identity_on_values() {
        // rows of the attention matrix sum to 1, so constant V passes through
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.71).sin()).collect();
        let q = g.input(Tensor::new(1, 2, 6, 1, data.clone()).unwrap());
        let k = g.input(Tensor::new(1, 2, 6, 1, data).unwrap());
        let v = g.input(Tensor::filled(1, 2, 6, 1, 2.5));
        let out = g.attention(q, k, v, 2).unwrap();
        for val in g.value(out).data() {
            assert!((val - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_attention_returns_the_value() {
        let mut g = Graph::new();
        let q = g.input(Tensor::new(1, 2, 1, 1, vec![0.3, -0.7]).unwrap());
        let k = g.input(Tensor::new(1, 2, 1, 1, vec![1.1, 0.2]).unwrap());
        let v = g.input(Tensor::new(1, 2, 1, 1, vec![4.0, -3.0]).unwrap());
        let out = g.attention(q, k, v, 1).unwrap();
        assert_eq!(g.value(out).data(), &[4.0, -3.0]);
    }

    #[test]
    fn ce_loss_examples() {
        // uniform logits, K=4 -> ln 4
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(1, 4, 2, 2));
        let loss = g.ce_loss(logits, &[0, 1, 2, 3]).unwrap();
        assert!((g.value(loss).data()[0] - 4.0f64.ln()).abs() < 1e-12);

        // +100 margin on the true class -> loss under 1e-6
        let mut g = Graph::new();
        let mut t = Tensor::zeros(1, 2, 1, 2);
        t.set(0, 0, 0, 0, 100.0);
        t.set(0, 1, 0, 1, 100.0);
        let logits = g.param(t);
        let loss = g.ce_loss(logits, &[0, 1]).unwrap();
        assert!(g.value(loss).data()[0] < 1e-6);
        assert!(g.value(loss).data()[0] >= 0.0);

        // gradient of the two-logit symmetric case: (p - onehot) / pixels
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(1, 2, 1, 1));
        let loss = g.ce_loss(logits, &[0]).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        assert!((grad.data()[0] + 0.5).abs() < 1e-12);
        assert!((grad.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_rejects_out_of_range_class() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(1, 3, 1, 1));
        assert!(matches!(
            g.ce_loss(logits, &[3]),
            Err(TafeError::Data(_))
        ));
    }

    #[test]
    fn gradient_of_loss_sum_is_sum_of_gradients() {
        // Each loss touches the leaf exactly once, so walking the tape in
        // reverse (combined) and calling backward per loss in that same
        // order perform the identical sequence of accumulations.
        let build = |g: &mut Graph, x: NodeId| {
            let c1 = g.input(Tensor::new(1, 1, 1, 3, vec![0.9, -0.3, 1.7]).unwrap());
            let p1 = g.mul(x, c1).unwrap();
            let l1 = g.sum(p1);
            let c2 = g.input(Tensor::new(1, 1, 1, 3, vec![-2.2, 0.4, 0.05]).unwrap());
            let p2 = g.mul(x, c2).unwrap();
            let l2 = g.sum(p2);
            (l1, l2)
        };
        let x0 = Tensor::new(1, 1, 1, 3, vec![0.4, -1.2, 2.2]).unwrap();

        let mut g1 = Graph::new();
        let x = g1.param(x0.clone());
        let (l1, l2) = build(&mut g1, x);
        let total = g1.add(l1, l2).unwrap();
        g1.backward(total).unwrap();
        let combined = g1.grad(x).unwrap().clone();

        let mut g2 = Graph::new();
        let x = g2.param(x0.clone());
        let (l1, l2) = build(&mut g2, x);
        g2.backward(l2).unwrap();
        g2.backward(l1).unwrap();
        let accumulated = g2.grad(x).unwrap().clone();

        assert_eq!(combined.data(), accumulated.data());

        // With a shared nonlinear subgraph the accumulation association
        // differs, so only numerical (not bit-level) linearity holds.
        let quad = |g: &mut Graph, x: NodeId| {
            let sq = g.mul(x, x).unwrap();
            let l1 = g.sum(sq);
            let cube = g.mul(sq, x).unwrap();
            let l2 = g.sum(cube);
            (l1, l2)
        };
        let mut g3 = Graph::new();
        let x3 = g3.param(x0.clone());
        let (l1, l2) = quad(&mut g3, x3);
        let total = g3.add(l1, l2).unwrap();
        g3.backward(total).unwrap();
        let mut g4 = Graph::new();
        let x4 = g4.param(x0);
        let (l1, l2) = quad(&mut g4, x4);
        g4.backward(l1).unwrap();
        g4.backward(l2).unwrap();
        let diff = g3.grad(x3).unwrap().max_abs_diff(g4.grad(x4).unwrap());
        assert!(diff < 1e-12, "linearity drift {diff}");
    }

    #[test]
    fn unreached_parameter_still_gets_zero_gradient() {
        // relu(-x) kills the only path but the leaf stays reachable
        let mut g = Graph::new();
        let x = g.param(Tensor::new(1, 1, 1, 1, vec![-3.0]).unwrap());
        let r = g.relu(x);
        let loss = g.sum(r);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
    }
}
