//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a define-by-run tape: every primitive both computes its
//! value eagerly and records the operation for the backward sweep. Graphs are
//! rebuilt per forward pass and confined to one worker; cross-pass state
//! (weights, hook closures) lives outside.
//!
//! Gradient hooks attach to individual nodes and rewrite the incoming
//! gradient before it propagates further upstream. Forward passes can tag
//! nodes with stable site names (`"blocks.2.qkv"`) so hook installation
//! survives graph rebuilds.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{CogoError, Result};
use crate::tensor::Tensor;

/// Gradient transform: incoming gradient in, same-shaped gradient out.
pub type HookFn = Rc<dyn Fn(&Tensor) -> Result<Tensor>>;

/// Handle to one registered hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HookHandle {
    node: NodeId,
    slot: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

const LAYER_NORM_EPS: f32 = 1e-5;

enum Op {
    Leaf,
    /// Batched matmul: (.., M, K) x (.., K, N) -> (.., M, N).
    Matmul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    /// (.., D) plus bias (D), broadcast over leading dims.
    AddBias(usize, usize),
    /// (1, ..) -> (copies, ..).
    BroadcastRows(usize, usize),
    Reshape(usize),
    Transpose(usize, Vec<usize>),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
        end: usize,
    },
    Concat(usize, usize, usize),
    Softmax(usize, usize),
    /// Normalizes the last axis; inputs (x, gamma, beta).
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        inv_std: Vec<f32>,
        normalized: Vec<f32>,
    },
    Gelu(usize),
    Mean(usize),
    Sum(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    /// Patch extraction: (B, C, H, W) -> (B, OH*OW, C*K*K).
    Im2col {
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    hooks: Vec<Vec<(u64, HookFn)>>,
    next_hook_slot: u64,
    tags: HashMap<String, usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            hooks: Vec::new(),
            next_hook_slot: 0,
            tags: HashMap::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.grads.push(None);
        self.hooks.push(Vec::new());
        NodeId {
            graph: self.id,
            index,
        }
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.graph != self.id || id.index >= self.nodes.len() {
            return Err(CogoError::StaleNode {
                index: id.index,
                node_graph: id.graph,
                graph: self.id,
            });
        }
        Ok(id.index)
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[self.check(id).expect("node from another graph")].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    /// Gradient from the most recent backward pass, if one reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        let idx = self.check(id).ok()?;
        self.grads[idx].as_ref()
    }

    // ---- leaves, tags, hooks -------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Name a node with a stable site tag (replaces any previous holder).
    pub fn tag_node(&mut self, tag: impl Into<String>, node: NodeId) -> Result<()> {
        let idx = self.check(node)?;
        self.tags.insert(tag.into(), idx);
        Ok(())
    }

    pub fn node_by_tag(&self, tag: &str) -> Option<NodeId> {
        self.tags.get(tag).map(|&index| NodeId {
            graph: self.id,
            index,
        })
    }

    /// Route this node's incoming gradient through `hook` on later backward
    /// passes. Hooks on one node compose in registration order.
    pub fn register_hook(&mut self, node: NodeId, hook: HookFn) -> Result<HookHandle> {
        let idx = self.check(node)?;
        let slot = self.next_hook_slot;
        self.next_hook_slot += 1;
        self.hooks[idx].push((slot, hook));
        Ok(HookHandle { node, slot })
    }

    pub fn remove_hook(&mut self, handle: HookHandle) -> Result<()> {
        let idx = self.check(handle.node)?;
        let before = self.hooks[idx].len();
        self.hooks[idx].retain(|(slot, _)| *slot != handle.slot);
        if self.hooks[idx].len() == before {
            return Err(CogoError::UnknownHook(handle.slot));
        }
        Ok(())
    }

    // ---- primitives -----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        let rank = sa.len();
        let conforms = rank >= 2
            && sb.len() == rank
            && sa[..rank - 2] == sb[..rank - 2]
            && sa[rank - 1] == sb[rank - 2];
        if !conforms {
            return Err(CogoError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[rank - 2], sa[rank - 1], sb[rank - 1]);
        let batch: usize = sa[..rank - 2].iter().product();
        let mut out_shape = sa.to_vec();
        out_shape[rank - 2] = m;
        out_shape[rank - 1] = n;
        let mut out = vec![0.0f32; batch * m * n];
        let (da, db) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        batched_gemm(da, db, batch, m, k, n, &mut out);
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(Op::Matmul(ai, bi), Tensor::new(out_shape, out)?, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ai].value.add(&self.nodes[bi].value)?;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(Op::Add(ai, bi), value, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = self
            .nodes[ai]
            .value
            .zip(&self.nodes[bi].value, "mul", |x, y| x * y)?;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(Op::Mul(ai, bi), value, needs))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> Result<NodeId> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.scale(factor);
        let needs = self.needs(ai);
        Ok(self.push(Op::Scale(ai, factor), value, needs))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(bias)?);
        let sa = self.nodes[ai].value.shape().to_vec();
        let sb = self.nodes[bi].value.shape().to_vec();
        let d = *sa.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != d || sa.is_empty() {
            return Err(CogoError::ShapeMismatch {
                op: "add_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let bias_data = self.nodes[bi].value.data();
        let mut out = self.nodes[ai].value.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bias_data) {
                *o += *b;
            }
        }
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(Op::AddBias(ai, bi), Tensor::new(sa, out)?, needs))
    }

    /// Repeat a leading singleton axis: (1, ..) -> (copies, ..).
    pub fn broadcast_rows(&mut self, a: NodeId, copies: usize) -> Result<NodeId> {
        let ai = self.check(a)?;
        let sa = self.nodes[ai].value.shape().to_vec();
        if sa.first() != Some(&1) {
            return Err(CogoError::InvalidShape {
                op: "broadcast_rows",
                shape: sa,
                reason: "leading axis must be 1".into(),
            });
        }
        let inner = self.nodes[ai].value.numel();
        let mut out_shape = sa;
        out_shape[0] = copies;
        let src = self.nodes[ai].value.data();
        let mut out = Vec::with_capacity(copies * inner);
        for _ in 0..copies {
            out.extend_from_slice(src);
        }
        let needs = self.needs(ai);
        Ok(self.push(
            Op::BroadcastRows(ai, copies),
            Tensor::new(out_shape, out)?,
            needs,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.reshape(shape)?;
        let needs = self.needs(ai);
        Ok(self.push(Op::Reshape(ai), value, needs))
    }

    /// General axis permutation; `perm[i]` names the input axis that becomes
    /// output axis `i`.
    pub fn transpose(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let ai = self.check(a)?;
        let sa = self.nodes[ai].value.shape().to_vec();
        let mut seen = vec![false; sa.len()];
        let valid = perm.len() == sa.len()
            && perm.iter().all(|&p| {
                if p >= sa.len() || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(CogoError::InvalidShape {
                op: "transpose",
                shape: sa,
                reason: format!("invalid permutation {perm:?}"),
            });
        }
        let out = permute(&self.nodes[ai].value, perm);
        let needs = self.needs(ai);
        Ok(self.push(Op::Transpose(ai, perm.to_vec()), out, needs))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let ai = self.check(a)?;
        let sa = self.nodes[ai].value.shape().to_vec();
        if axis >= sa.len() || start >= end || end > sa[axis] {
            return Err(CogoError::InvalidShape {
                op: "slice",
                shape: sa,
                reason: format!("axis {axis} range {start}..{end}"),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let extent = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let width = end - start;
        let mut out_shape = sa.clone();
        out_shape[axis] = width;
        let src = self.nodes[ai].value.data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + width * inner]);
        }
        let needs = self.needs(ai);
        Ok(self.push(
            Op::Slice {
                input: ai,
                axis,
                start,
                end,
            },
            Tensor::new(out_shape, out)?,
            needs,
        ))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let sa = self.nodes[ai].value.shape().to_vec();
        let sb = self.nodes[bi].value.shape().to_vec();
        let compatible = axis < sa.len()
            && sa.len() == sb.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(CogoError::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (ea, eb) = (sa[axis], sb[axis]);
        let mut out_shape = sa.clone();
        out_shape[axis] = ea + eb;
        let (da, db) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let mut out = Vec::with_capacity(outer * (ea + eb) * inner);
        for o in 0..outer {
            out.extend_from_slice(&da[o * ea * inner..(o + 1) * ea * inner]);
            out.extend_from_slice(&db[o * eb * inner..(o + 1) * eb * inner]);
        }
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(
            Op::Concat(ai, bi, axis),
            Tensor::new(out_shape, out)?,
            needs,
        ))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let ai = self.check(a)?;
        let sa = self.nodes[ai].value.shape().to_vec();
        if axis >= sa.len() {
            return Err(CogoError::InvalidShape {
                op: "softmax",
                shape: sa,
                reason: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let extent = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let mut out = self.nodes[ai].value.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut max = f32::NEG_INFINITY;
                for e in 0..extent {
                    max = max.max(out[base + e * inner]);
                }
                let mut sum = 0.0f32;
                for e in 0..extent {
                    let idx = base + e * inner;
                    out[idx] = (out[idx] - max).exp();
                    sum += out[idx];
                }
                for e in 0..extent {
                    out[base + e * inner] /= sum;
                }
            }
        }
        let needs = self.needs(ai);
        Ok(self.push(Op::Softmax(ai, axis), Tensor::new(sa, out)?, needs))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let sx = self.nodes[xi].value.shape().to_vec();
        let d = *sx.last().unwrap_or(&0);
        for (name, idx) in [("gamma", gi), ("beta", bi)] {
            let s = self.nodes[idx].value.shape();
            if s != [d] {
                return Err(CogoError::ShapeMismatch {
                    op: if name == "gamma" {
                        "layer_norm gamma"
                    } else {
                        "layer_norm beta"
                    },
                    lhs: sx,
                    rhs: s.to_vec(),
                });
            }
        }
        let lanes = self.nodes[xi].value.numel() / d;
        let src = self.nodes[xi].value.data();
        let gamma_d = self.nodes[gi].value.data();
        let beta_d = self.nodes[bi].value.data();
        let mut out = vec![0.0f32; src.len()];
        let mut inv_std = vec![0.0f32; lanes];
        let mut normalized = vec![0.0f32; src.len()];
        for lane in 0..lanes {
            let xs = &src[lane * d..(lane + 1) * d];
            let mean = xs.iter().sum::<f32>() / d as f32;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[lane] = istd;
            for j in 0..d {
                let norm = (xs[j] - mean) * istd;
                normalized[lane * d + j] = norm;
                out[lane * d + j] = gamma_d[j] * norm + beta_d[j];
            }
        }
        let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
        Ok(self.push(
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                inv_std,
                normalized,
            },
            Tensor::new(sx, out)?,
            needs,
        ))
    }

    /// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.map(gelu_scalar);
        let needs = self.needs(ai);
        Ok(self.push(Op::Gelu(ai), value, needs))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let ai = self.check(a)?;
        let n = self.nodes[ai].value.numel() as f64;
        let sum: f64 = self.nodes[ai].value.data().iter().map(|&v| v as f64).sum();
        let needs = self.needs(ai);
        Ok(self.push(Op::Mean(ai), Tensor::scalar((sum / n) as f32), needs))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ai = self.check(a)?;
        let sum: f64 = self.nodes[ai].value.data().iter().map(|&v| v as f64).sum();
        let needs = self.needs(ai);
        Ok(self.push(Op::Sum(ai), Tensor::scalar(sum as f32), needs))
    }

    /// Mean cross-entropy between logits (B, C) and integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let li = self.check(logits)?;
        let sl = self.nodes[li].value.shape().to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(CogoError::InvalidShape {
                op: "cross_entropy",
                shape: sl,
                reason: format!("need (B, C) logits with B == {} labels", labels.len()),
            });
        }
        let (b, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(CogoError::InvalidShape {
                op: "cross_entropy",
                shape: sl,
                reason: format!("label {bad} out of range for {c} classes"),
            });
        }
        let src = self.nodes[li].value.data();
        let mut probs = vec![0.0f32; b * c];
        let mut loss = 0.0f64;
        for row in 0..b {
            let xs = &src[row * c..(row + 1) * c];
            let max = xs.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0f32;
            for j in 0..c {
                sum += (xs[j] - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..c {
                probs[row * c + j] = (xs[j] - lse).exp();
            }
            loss += (lse - xs[labels[row]]) as f64;
        }
        let needs = self.needs(li);
        Ok(self.push(
            Op::CrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar((loss / b as f64) as f32),
            needs,
        ))
    }

    /// Extract sliding patches: (B, C, H, W) -> (B, OH*OW, C*K*K) with zero
    /// padding. With kernel == stride and pad 0 this is patch embedding.
    pub fn im2col(&mut self, a: NodeId, kernel: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let ai = self.check(a)?;
        let sa = self.nodes[ai].value.shape().to_vec();
        if sa.len() != 4 || kernel == 0 || stride == 0 {
            return Err(CogoError::InvalidShape {
                op: "im2col",
                shape: sa,
                reason: "need (B, C, H, W) input and positive kernel/stride".into(),
            });
        }
        let (b, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(CogoError::InvalidShape {
                op: "im2col",
                shape: sa,
                reason: format!("kernel {kernel} larger than padded input"),
            });
        }
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (w + 2 * pad - kernel) / stride + 1;
        let cols = c * kernel * kernel;
        let src = self.nodes[ai].value.data();
        let mut out = vec![0.0f32; b * oh * ow * cols];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let patch = ((bi * oh + oy) * ow + ox) * cols;
                    for ci in 0..c {
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out[patch + (ci * kernel + ky) * kernel + kx] = src
                                    [((bi * c + ci) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(ai);
        Ok(self.push(
            Op::Im2col {
                input: ai,
                kernel,
                stride,
                pad,
            },
            Tensor::new(vec![b, oh * ow, cols], out)?,
            needs,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Populate gradients of `loss` (a scalar) with respect to every node
    /// that (transitively) involves a `requires_grad` leaf. Hooks fire when a
    /// node's gradient is finalized, before it propagates to its inputs.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_idx = self.check(loss)?;
        if self.nodes[loss_idx].value.numel() != 1 {
            return Err(CogoError::NonScalarLoss {
                shape: self.nodes[loss_idx].value.shape().to_vec(),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[loss_idx].needs_grad {
            return Ok(());
        }
        let seed_shape = self.nodes[loss_idx].value.shape().to_vec();
        self.grads[loss_idx] = Some(Tensor::filled(&seed_shape, 1.0));

        for idx in (0..=loss_idx).rev() {
            if self.grads[idx].is_none() {
                continue;
            }
            if !self.hooks[idx].is_empty() {
                let mut current = self.grads[idx].take().expect("checked above");
                for (_, hook) in &self.hooks[idx] {
                    let next = hook(&current)?;
                    if next.shape() != current.shape() {
                        return Err(CogoError::HookShape {
                            input: current.shape().to_vec(),
                            output: next.shape().to_vec(),
                        });
                    }
                    current = next;
                }
                self.grads[idx] = Some(current);
            }
            self.propagate(idx)?;
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], idx: usize, delta: &[f32]) {
        if !nodes[idx].needs_grad {
            return;
        }
        let slot = grads[idx].get_or_insert_with(|| Tensor::zeros(nodes[idx].value.shape()));
        for (g, d) in slot.data_mut().iter_mut().zip(delta) {
            *g += *d;
        }
    }

    fn propagate(&mut self, idx: usize) -> Result<()> {
        let grad = self.grads[idx].take().expect("grad present");
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let g = grad.data();
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let sa = nodes[*a].value.shape();
                let rank = sa.len();
                let (m, k) = (sa[rank - 2], sa[rank - 1]);
                let n = nodes[*b].value.shape()[rank - 1];
                let batch: usize = sa[..rank - 2].iter().product();
                if nodes[*a].needs_grad {
                    // dA = dC . B^T
                    let bd = nodes[*b].value.data();
                    let mut da = vec![0.0f32; batch * m * k];
                    let task = |batch_i: usize, out: &mut [f32]| {
                        let mut bt = vec![0.0f32; k * n];
                        transpose_2d(&bd[batch_i * k * n..(batch_i + 1) * k * n], k, n, &mut bt);
                        gemm_acc(&g[batch_i * m * n..(batch_i + 1) * m * n], &bt, m, n, k, out);
                    };
                    if batch > 1 && batch * m * k * n >= PAR_GEMM_WORK {
                        da.par_chunks_mut(m * k)
                            .enumerate()
                            .for_each(|(bi, out)| task(bi, out));
                    } else {
                        for (bi, out) in da.chunks_mut(m * k).enumerate() {
                            task(bi, out);
                        }
                    }
                    Self::accumulate(grads, nodes, *a, &da);
                }
                if nodes[*b].needs_grad {
                    // dB = A^T . dC
                    let ad = nodes[*a].value.data();
                    let mut db = vec![0.0f32; batch * k * n];
                    let task = |batch_i: usize, out: &mut [f32]| {
                        let mut at = vec![0.0f32; m * k];
                        transpose_2d(&ad[batch_i * m * k..(batch_i + 1) * m * k], m, k, &mut at);
                        gemm_acc(&at, &g[batch_i * m * n..(batch_i + 1) * m * n], k, m, n, out);
                    };
                    if batch > 1 && batch * m * k * n >= PAR_GEMM_WORK {
                        db.par_chunks_mut(k * n)
                            .enumerate()
                            .for_each(|(bi, out)| task(bi, out));
                    } else {
                        for (bi, out) in db.chunks_mut(k * n).enumerate() {
                            task(bi, out);
                        }
                    }
                    Self::accumulate(grads, nodes, *b, &db);
                }
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, nodes, *a, g);
                Self::accumulate(grads, nodes, *b, g);
            }
            Op::Mul(a, b) => {
                if nodes[*a].needs_grad {
                    let other = nodes[*b].value.data();
                    let da: Vec<f32> = g.iter().zip(other).map(|(x, y)| x * y).collect();
                    Self::accumulate(grads, nodes, *a, &da);
                }
                if nodes[*b].needs_grad {
                    let other = nodes[*a].value.data();
                    let db: Vec<f32> = g.iter().zip(other).map(|(x, y)| x * y).collect();
                    Self::accumulate(grads, nodes, *b, &db);
                }
            }
            Op::Scale(a, factor) => {
                let da: Vec<f32> = g.iter().map(|x| x * factor).collect();
                Self::accumulate(grads, nodes, *a, &da);
            }
            Op::AddBias(a, b) => {
                Self::accumulate(grads, nodes, *a, g);
                if nodes[*b].needs_grad {
                    let d = nodes[*b].value.numel();
                    let mut db = vec![0.0f32; d];
                    for row in g.chunks(d) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += *v;
                        }
                    }
                    Self::accumulate(grads, nodes, *b, &db);
                }
            }
            Op::BroadcastRows(a, copies) => {
                let inner = nodes[*a].value.numel();
                let mut da = vec![0.0f32; inner];
                for copy in 0..*copies {
                    for j in 0..inner {
                        da[j] += g[copy * inner + j];
                    }
                }
                Self::accumulate(grads, nodes, *a, &da);
            }
            Op::Reshape(a) => {
                Self::accumulate(grads, nodes, *a, g);
            }
            Op::Transpose(a, perm) => {
                // scatter through the inverse permutation
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let da = permute(&grad.reshape(nodes[idx].value.shape())?, &inv);
                Self::accumulate(grads, nodes, *a, da.data());
            }
            Op::Slice {
                input,
                axis,
                start,
                end,
            } => {
                let sa = nodes[*input].value.shape();
                let outer: usize = sa[..*axis].iter().product();
                let extent = sa[*axis];
                let inner: usize = sa[*axis + 1..].iter().product();
                let width = end - start;
                let mut da = vec![0.0f32; nodes[*input].value.numel()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * width * inner;
                    da[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                Self::accumulate(grads, nodes, *input, &da);
            }
            Op::Concat(a, b, axis) => {
                let sa = nodes[*a].value.shape();
                let sb = nodes[*b].value.shape();
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis + 1..].iter().product();
                let (ea, eb) = (sa[*axis], sb[*axis]);
                if nodes[*a].needs_grad {
                    let mut da = vec![0.0f32; nodes[*a].value.numel()];
                    for o in 0..outer {
                        let src = o * (ea + eb) * inner;
                        da[o * ea * inner..(o + 1) * ea * inner]
                            .copy_from_slice(&g[src..src + ea * inner]);
                    }
                    Self::accumulate(grads, nodes, *a, &da);
                }
                if nodes[*b].needs_grad {
                    let mut db = vec![0.0f32; nodes[*b].value.numel()];
                    for o in 0..outer {
                        let src = o * (ea + eb) * inner + ea * inner;
                        db[o * eb * inner..(o + 1) * eb * inner]
                            .copy_from_slice(&g[src..src + eb * inner]);
                    }
                    Self::accumulate(grads, nodes, *b, &db);
                }
            }
            Op::Softmax(a, axis) => {
                let p = nodes[idx].value.data();
                let sa = nodes[*a].value.shape();
                let outer: usize = sa[..*axis].iter().product();
                let extent = sa[*axis];
                let inner: usize = sa[*axis + 1..].iter().product();
                let mut da = vec![0.0f32; p.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * extent * inner + i;
                        let mut dot = 0.0f32;
                        for e in 0..extent {
                            let j = base + e * inner;
                            dot += g[j] * p[j];
                        }
                        for e in 0..extent {
                            let j = base + e * inner;
                            da[j] = p[j] * (g[j] - dot);
                        }
                    }
                }
                Self::accumulate(grads, nodes, *a, &da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                inv_std,
                normalized,
            } => {
                let d = nodes[*gamma].value.numel();
                let lanes = normalized.len() / d;
                let gamma_d = nodes[*gamma].value.data();
                if nodes[*beta].needs_grad {
                    let mut dbeta = vec![0.0f32; d];
                    for lane in 0..lanes {
                        for j in 0..d {
                            dbeta[j] += g[lane * d + j];
                        }
                    }
                    Self::accumulate(grads, nodes, *beta, &dbeta);
                }
                if nodes[*gamma].needs_grad {
                    let mut dgamma = vec![0.0f32; d];
                    for lane in 0..lanes {
                        for j in 0..d {
                            dgamma[j] += g[lane * d + j] * normalized[lane * d + j];
                        }
                    }
                    Self::accumulate(grads, nodes, *gamma, &dgamma);
                }
                if nodes[*x].needs_grad {
                    let mut dx = vec![0.0f32; normalized.len()];
                    for lane in 0..lanes {
                        let base = lane * d;
                        let mut mean_dn = 0.0f32;
                        let mut mean_dn_norm = 0.0f32;
                        for j in 0..d {
                            let dn = g[base + j] * gamma_d[j];
                            mean_dn += dn;
                            mean_dn_norm += dn * normalized[base + j];
                        }
                        mean_dn /= d as f32;
                        mean_dn_norm /= d as f32;
                        for j in 0..d {
                            let dn = g[base + j] * gamma_d[j];
                            dx[base + j] = (dn - mean_dn - normalized[base + j] * mean_dn_norm)
                                * inv_std[lane];
                        }
                    }
                    Self::accumulate(grads, nodes, *x, &dx);
                }
            }
            Op::Gelu(a) => {
                let xs = nodes[*a].value.data();
                let da: Vec<f32> = g
                    .iter()
                    .zip(xs)
                    .map(|(gv, &x)| gv * gelu_derivative(x))
                    .collect();
                Self::accumulate(grads, nodes, *a, &da);
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.numel() as f32;
                let da = vec![g[0] / n; nodes[*a].value.numel()];
                Self::accumulate(grads, nodes, *a, &da);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; nodes[*a].value.numel()];
                Self::accumulate(grads, nodes, *a, &da);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f32;
                let mut dl = probs.iter().map(|&p| p * scale).collect::<Vec<f32>>();
                for (row, &label) in labels.iter().enumerate() {
                    dl[row * c + label] -= scale;
                }
                Self::accumulate(grads, nodes, *logits, &dl);
            }
            Op::Im2col {
                input,
                kernel,
                stride,
                pad,
            } => {
                let sa = nodes[*input].value.shape();
                let (b, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
                let oh = (h + 2 * pad - kernel) / stride + 1;
                let ow = (w + 2 * pad - kernel) / stride + 1;
                let cols = c * kernel * kernel;
                let mut da = vec![0.0f32; nodes[*input].value.numel()];
                for bi in 0..b {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let patch = ((bi * oh + oy) * ow + ox) * cols;
                            for ci in 0..c {
                                for ky in 0..*kernel {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..*kernel {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        da[((bi * c + ci) * h + iy as usize) * w + ix as usize] +=
                                            g[patch + (ci * kernel + ky) * kernel + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, nodes, *input, &da);
            }
        }
        self.grads[idx] = Some(grad);
        Ok(())
    }
}

fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x / std::f32::consts::SQRT_2))
}

fn gelu_derivative(x: f32) -> f32 {
    let phi_cdf = 0.5 * (1.0 + libm::erff(x / std::f32::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f32::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

/// out(N, M) = in(M, N)^T
fn transpose_2d(src: &[f32], m: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
}

fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    // input stride per output axis: walking output in row-major order reads
    // the input at these strides
    let rd: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    match rank {
        0 | 1 => out.copy_from_slice(src),
        2 => {
            let (d0, d1) = (out_shape[0], out_shape[1]);
            let mut o = 0;
            for i0 in 0..d0 {
                let b0 = i0 * rd[0];
                for i1 in 0..d1 {
                    out[o] = src[b0 + i1 * rd[1]];
                    o += 1;
                }
            }
        }
        3 => {
            let (d0, d1, d2) = (out_shape[0], out_shape[1], out_shape[2]);
            let mut o = 0;
            for i0 in 0..d0 {
                for i1 in 0..d1 {
                    let b = i0 * rd[0] + i1 * rd[1];
                    if rd[2] == 1 {
                        out[o..o + d2].copy_from_slice(&src[b..b + d2]);
                        o += d2;
                    } else {
                        for i2 in 0..d2 {
                            out[o] = src[b + i2 * rd[2]];
                            o += 1;
                        }
                    }
                }
            }
        }
        4 => {
            let (d0, d1, d2, d3) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
            let mut o = 0;
            for i0 in 0..d0 {
                for i1 in 0..d1 {
                    for i2 in 0..d2 {
                        let b = i0 * rd[0] + i1 * rd[1] + i2 * rd[2];
                        if rd[3] == 1 {
                            out[o..o + d3].copy_from_slice(&src[b..b + d3]);
                            o += d3;
                        } else {
                            for i3 in 0..d3 {
                                out[o] = src[b + i3 * rd[3]];
                                o += 1;
                            }
                        }
                    }
                }
            }
        }
        _ => {
            let mut index = vec![0usize; rank];
            for o in 0..out.len() {
                let mut off = 0;
                for (axis, &stride) in rd.iter().enumerate() {
                    off += index[axis] * stride;
                }
                out[o] = src[off];
                for axis in (0..rank).rev() {
                    index[axis] += 1;
                    if index[axis] < out_shape[axis] {
                        break;
                    }
                    index[axis] = 0;
                }
            }
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves element count")
}

/// Work threshold above which a GEMM is distributed over the rayon pool.
/// Each output row is always produced by exactly one thread with a fixed
/// accumulation order, so results are bit-identical at any thread count.
const PAR_GEMM_WORK: usize = 1 << 18;

fn gemm_rows_seq(a: &[f32], b: &[f32], k: usize, n: usize, out: &mut [f32]) {
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// out(M, N) += A(M, K) . B(K, N)
fn gemm_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m >= 8 && m * k * n >= PAR_GEMM_WORK {
        // chunk rows so each rayon task carries real work
        let rows_per_task = (m / 16).max(1);
        out.par_chunks_mut(rows_per_task * n)
            .enumerate()
            .for_each(|(t, out_rows)| {
                let start = t * rows_per_task;
                let rows = out_rows.len() / n;
                gemm_rows_seq(&a[start * k..(start + rows) * k], b, k, n, out_rows);
            });
    } else {
        gemm_rows_seq(a, b, k, n, out);
    }
}

fn batched_gemm(a: &[f32], b: &[f32], batch: usize, m: usize, k: usize, n: usize, out: &mut [f32]) {
    if batch == 1 {
        return gemm_acc(a, b, m, k, n, out);
    }
    if batch * m * k * n >= PAR_GEMM_WORK {
        out.par_chunks_mut(m * n).enumerate().for_each(|(bi, o)| {
            gemm_rows_seq(
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                k,
                n,
                o,
            );
        });
    } else {
        for bi in 0..batch {
            gemm_rows_seq(
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
    }
}
