use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(NodeId);

impl Var {
    pub fn id(self) -> NodeId {
        self.0
    }
}

/// A value stored in the graph, together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct DiffTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub node_id: NodeId,
    leaf: bool,
}

impl DiffTensor {
    pub fn is_leaf(&self) -> bool {
        self.leaf
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
    }

    fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Operation kinds understood by [`Graph::apply`].
#[derive(Clone, Debug)]
pub enum OpKind {
    Add,
    Sub,
    MulElementwise,
    /// `[n,k]·[k,m]`, or batched `[b,n,k]·[b,k,m]`.
    MatMul,
    /// Concatenate along `axis`; all other extents must agree.
    Concat {
        axis: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// Half-open range `start..end` along `axis`.
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    /// Output axis `i` is input axis `axes[i]`.
    Permute {
        axes: Vec<usize>,
    },
    /// Prepend a new leading axis holding `count` copies.
    Expand {
        count: usize,
    },
    Sigmoid,
    Tanh,
    Relu,
    /// Normalise each row of the last axis to zero mean and unit variance (no affine).
    LayerNorm {
        eps: f64,
    },
    SoftmaxLastAxis,
    Mean,
    Sum,
    /// `x * s` where `s` has exactly one element. The only broadcasting op.
    ScalarMul,
    /// Multiply by a constant.
    Scale(f64),
    /// Replace entries where `mask` is true with `value`. `mask` covers the last two axes.
    MaskedFill {
        mask: Arc<[bool]>,
        value: f64,
    },
    /// Row lookup into a `[vocab, width]` table.
    Gather {
        ids: Arc<[usize]>,
    },
    /// Mean cross-entropy of `[n, classes]` logits against integer labels.
    CrossEntropy {
        labels: Arc<[usize]>,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::MulElementwise => "mul_elementwise",
            OpKind::MatMul => "matmul",
            OpKind::Concat { .. } => "concat",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Slice { .. } => "slice",
            OpKind::Permute { .. } => "permute",
            OpKind::Expand { .. } => "expand",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::LayerNorm { .. } => "layernorm",
            OpKind::SoftmaxLastAxis => "softmax_last_axis",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::Scale(_) => "scale",
            OpKind::MaskedFill { .. } => "masked_fill",
            OpKind::Gather { .. } => "gather",
            OpKind::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

/// One recorded operation: enough to run its backward rule.
#[derive(Clone, Debug)]
pub struct OpRecord {
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    pub output: NodeId,
    saved: Vec<f64>,
}

/// Append-only computation graph. Confined to one thread at a time (`Send`, not shared).
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<DiffTensor>,
    records: Vec<OpRecord>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, leaf: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let node_id = self.nodes.len();
        self.nodes.push(DiffTensor {
            shape,
            data,
            grad: None,
            requires_grad,
            node_id,
            leaf,
        });
        Var(node_id)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), true, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), false, true)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, false, true)
    }

    pub fn node(&self, v: Var) -> &DiffTensor {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes[v.0].to_tensor()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn records(&self) -> &[OpRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Evaluate `kind` on `inputs`, appending a record when any input needs gradients.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let (shape, data, saved) = self.forward(&kind, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let out = self.push(shape, data, requires_grad, false);
        if requires_grad {
            self.records.push(OpRecord {
                kind,
                inputs: inputs.iter().map(|v| v.0).collect(),
                output: out.0,
                saved,
            });
        }
        Ok(out)
    }

    fn arity(&self, kind: &OpKind, inputs: &[Var], want: usize) -> Result<()> {
        if inputs.len() != want {
            return Err(Error::shape(
                kind.name(),
                format!("expected {want} inputs, got {}", inputs.len()),
            ));
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn forward(&self, kind: &OpKind, inputs: &[Var]) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        let name = kind.name();
        match kind {
            OpKind::Add | OpKind::Sub | OpKind::MulElementwise => {
                self.arity(kind, inputs, 2)?;
                let (a, b) = (&self.nodes[inputs[0].0], &self.nodes[inputs[1].0]);
                if a.shape != b.shape {
                    return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape, b.shape)));
                }
                let data = match kind {
                    OpKind::Add => a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
                    OpKind::Sub => a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
                    _ => a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
                };
                Ok((a.shape.clone(), data, Vec::new()))
            }
            OpKind::MatMul => {
                self.arity(kind, inputs, 2)?;
                let (a, b) = (&self.nodes[inputs[0].0], &self.nodes[inputs[1].0]);
                let (batch, n, k, m) = matmul_dims(&a.shape, &b.shape)?;
                let mut out = vec![0.0; batch * n * m];
                for t in 0..batch {
                    matmul_acc(
                        &a.data[t * n * k..(t + 1) * n * k],
                        &b.data[t * k * m..(t + 1) * k * m],
                        &mut out[t * n * m..(t + 1) * n * m],
                        n,
                        k,
                        m,
                    );
                }
                let shape = if a.shape.len() == 3 {
                    vec![batch, n, m]
                } else {
                    vec![n, m]
                };
                Ok((shape, out, Vec::new()))
            }
            OpKind::Concat { axis } => {
                let axis = *axis;
                let first = inputs
                    .first()
                    .map(|v| &self.nodes[v.0])
                    .ok_or_else(|| Error::shape(name, "no inputs"))?;
                if axis >= first.shape.len() {
                    return Err(Error::shape(name, format!("axis {axis} of {:?}", first.shape)));
                }
                let mut shape = first.shape.clone();
                shape[axis] = 0;
                for v in inputs {
                    let s = &self.nodes[v.0].shape;
                    let compatible = s.len() == first.shape.len()
                        && s.iter()
                            .zip(&first.shape)
                            .enumerate()
                            .all(|(i, (x, y))| i == axis || x == y);
                    if !compatible {
                        return Err(Error::shape(name, format!("{:?} vs {:?}", first.shape, s)));
                    }
                    shape[axis] += s[axis];
                }
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut data = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for v in inputs {
                        let n = &self.nodes[v.0];
                        let block = n.shape[axis] * inner;
                        data.extend_from_slice(&n.data[o * block..(o + 1) * block]);
                    }
                }
                Ok((shape, data, Vec::new()))
            }
            OpKind::Reshape { shape } => {
                self.arity(kind, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                let numel: usize = shape.iter().product();
                if numel != x.numel() || shape.iter().any(|&d| d == 0) {
                    return Err(Error::shape(name, format!("{:?} -> {:?}", x.shape, shape)));
                }
                Ok((shape.clone(), x.data.clone(), Vec::new()))
            }
            OpKind::Slice { axis, start, end } => {
                self.arity(kind, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                let (axis, start, end) = (*axis, *start, *end);
                if axis >= x.shape.len() || start >= end || end > x.shape[axis] {
                    return Err(Error::shape(
                        name,
                        format!("range {start}..{end} on axis {axis} of {:?}", x.shape),
                    ));
                }
                let outer: usize = x.shape[..axis].iter().product();
                let inner: usize = x.shape[axis + 1..].iter().product();
                let ext = x.shape[axis];
                let mut data = Vec::with_capacity(outer * (end - start) * inner);
                for o in 0..outer {
                    let base = o * ext * inner;
                    data.extend_from_slice(&x.data[base + start * inner..base + end * inner]);
                }
                let mut shape = x.shape.clone();
                shape[axis] = end - start;
                Ok((shape, data, Vec::new()))
            }
            OpKind::Permute { axes } => {
                self.arity(kind, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                let mut seen = vec![false; x.shape.len()];
                let valid = axes.len() == x.shape.len()
                    && axes.iter().all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
                if !valid {
                    return Err(Error::shape(name, format!("axes {axes:?} for {:?}", x.shape)));
                }
                let shape: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
                let data = permute_data(&x.data, &x.shape, axes);
                Ok((shape, data, Vec::new()))
            }
            OpKind::Expand { count } => {
                self.arity(kind, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                if *count == 0 {
                    return Err(Error::shape(name, "count must be positive"));
                }
                let mut shape = vec![*count];
                shape.extend_from_slice(&x.shape);
                let mut data = Vec::with_capacity(count * x.numel());
                for _ in 0..*count {
                    data.extend_from_slice(&x.data);
                }
                Ok((shape, data, Vec::new()))
            }
            OpKind::Sigmoid | OpKind::Tanh | OpKind::Relu | OpKind::Scale(_) => {
                self.arity(kind, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                let data = match kind {
                    OpKind::Sigmoid => x.data.iter().map(|&v| sigmoid(v)).collect(),
                    OpKind::Tanh => x.data.iter().map(|v| v.tanh()).collect(),
                    OpKind::Relu => x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                    OpKind::Scale(c) => x.data.iter().map(|v| v * c).collect(),
                    _ => unreachable!(),
                };
                Ok((x.shape.clone(), data, Vec::new()))
            }
            OpKind::LayerNorm { eps } => {
                self.arity(kind, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                let width = *x.shape.last().unwrap();
                let rows = x.numel() / width;
                let mut data = vec![0.0; x.numel()];
                let mut inv_std = Vec::with_capacity(rows);
                for r in 0..rows {
                    let row = &x.data[r * width..(r + 1) * width];
                    let mean = row.iter().sum::<f64>() / width as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for (o, v) in data[r * width..(r + 1) * width].iter_mut().zip(row) {
                        *o = (v - mean) * inv;
                    }
                    inv_std.push(inv);
                }
                Ok((x.shape.clone(), data, inv_std))
            }
            OpKind::SoftmaxLastAxis => {
                self.arity(kind, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                let width = *x.shape.last().unwrap();
                let mut data = x.data.clone();
                for row in data.chunks_mut(width) {
                    softmax_in_place(row);
                }
                Ok((x.shape.clone(), data, Vec::new()))
            }
            OpKind::Mean | OpKind::Sum => {
                self.arity(kind, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                let s: f64 = x.data.iter().sum();
                let v = if matches!(kind, OpKind::Mean) {
                    s / x.numel() as f64
                } else {
                    s
                };
                Ok((vec![1], vec![v], Vec::new()))
            }
            OpKind::ScalarMul => {
                self.arity(kind, inputs, 2)?;
                let (x, s) = (&self.nodes[inputs[0].0], &self.nodes[inputs[1].0]);
                if s.numel() != 1 {
                    return Err(Error::shape(name, format!("scalar operand has shape {:?}", s.shape)));
                }
                let c = s.data[0];
                Ok((x.shape.clone(), x.data.iter().map(|v| v * c).collect(), Vec::new()))
            }
            OpKind::MaskedFill { mask, value } => {
                self.arity(kind, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                let nd = x.shape.len();
                if nd < 2 || x.shape[nd - 2] * x.shape[nd - 1] != mask.len() {
                    return Err(Error::shape(
                        name,
                        format!("mask of {} entries for {:?}", mask.len(), x.shape),
                    ));
                }
                let mut data = x.data.clone();
                for block in data.chunks_mut(mask.len()) {
                    for (d, &m) in block.iter_mut().zip(mask.iter()) {
                        if m {
                            *d = *value;
                        }
                    }
                }
                Ok((x.shape.clone(), data, Vec::new()))
            }
            OpKind::Gather { ids } => {
                self.arity(kind, inputs, 1)?;
                let table = &self.nodes[inputs[0].0];
                if table.shape.len() != 2 || ids.is_empty() {
                    return Err(Error::shape(name, format!("table {:?}", table.shape)));
                }
                let (vocab, width) = (table.shape[0], table.shape[1]);
                let mut data = Vec::with_capacity(ids.len() * width);
                for &id in ids.iter() {
                    if id >= vocab {
                        return Err(Error::shape(name, format!("id {id} >= vocab {vocab}")));
                    }
                    data.extend_from_slice(&table.data[id * width..(id + 1) * width]);
                }
                Ok((vec![ids.len(), width], data, Vec::new()))
            }
            OpKind::CrossEntropy { labels } => {
                self.arity(kind, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                if x.shape.len() != 2 || x.shape[0] != labels.len() {
                    return Err(Error::shape(
                        name,
                        format!("logits {:?} with {} labels", x.shape, labels.len()),
                    ));
                }
                let classes = x.shape[1];
                let mut probs = x.data.clone();
                let mut loss = 0.0;
                for (row, (logits, &label)) in probs.chunks_mut(classes).zip(labels.iter()).enumerate() {
                    if label >= classes {
                        return Err(Error::shape(name, format!("label {label} in row {row} >= {classes}")));
                    }
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    loss += lse - logits[label];
                    softmax_in_place(logits);
                }
                Ok((vec![1], vec![loss / labels.len() as f64], probs))
            }
        }
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate into every
    /// `requires_grad` leaf; calling twice without [`Graph::zero_grad`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].numel();
        if numel != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for rec in self.records.iter().rev() {
            let Some(g) = grads[rec.output].take() else {
                continue;
            };
            self.backward_record(rec, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if !(node.leaf && node.requires_grad) {
                continue;
            }
            let acc = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
            if let Some(g) = g {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        Ok(())
    }

    fn backward_record(&self, rec: &OpRecord, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[rec.inputs[i]].requires_grad;
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            let id = rec.inputs[i];
            if !nodes[id].requires_grad {
                return;
            }
            let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]);
            f(buf);
        };
        let out = &nodes[rec.output];
        match &rec.kind {
            OpKind::Add => {
                acc(0, &mut |b| add_into(b, g));
                acc(1, &mut |b| add_into(b, g));
            }
            OpKind::Sub => {
                acc(0, &mut |b| add_into(b, g));
                acc(1, &mut |b| b.iter_mut().zip(g).for_each(|(x, v)| *x -= v));
            }
            OpKind::MulElementwise => {
                let (a, bv) = (&nodes[rec.inputs[0]].data, &nodes[rec.inputs[1]].data);
                acc(0, &mut |b| {
                    for ((x, gv), y) in b.iter_mut().zip(g).zip(bv) {
                        *x += gv * y;
                    }
                });
                acc(1, &mut |b| {
                    for ((x, gv), y) in b.iter_mut().zip(g).zip(a) {
                        *x += gv * y;
                    }
                });
            }
            OpKind::MatMul => {
                let (a, bn) = (&nodes[rec.inputs[0]], &nodes[rec.inputs[1]]);
                let (batch, n, k, m) = matmul_dims(&a.shape, &bn.shape).expect("checked in forward");
                if wants(0) {
                    acc(0, &mut |da| {
                        for t in 0..batch {
                            matmul_grad_a(
                                &g[t * n * m..(t + 1) * n * m],
                                &bn.data[t * k * m..(t + 1) * k * m],
                                &mut da[t * n * k..(t + 1) * n * k],
                                n,
                                k,
                                m,
                            );
                        }
                    });
                }
                if wants(1) {
                    acc(1, &mut |db| {
                        for t in 0..batch {
                            matmul_grad_b(
                                &a.data[t * n * k..(t + 1) * n * k],
                                &g[t * n * m..(t + 1) * n * m],
                                &mut db[t * k * m..(t + 1) * k * m],
                                n,
                                k,
                                m,
                            );
                        }
                    });
                }
            }
            OpKind::Concat { axis } => {
                let axis = *axis;
                let outer: usize = out.shape[..axis].iter().product();
                let inner: usize = out.shape[axis + 1..].iter().product();
                let total = out.shape[axis] * inner;
                let mut offset = 0;
                for i in 0..rec.inputs.len() {
                    let block = nodes[rec.inputs[i]].shape[axis] * inner;
                    acc(i, &mut |b| {
                        for o in 0..outer {
                            add_into(
                                &mut b[o * block..(o + 1) * block],
                                &g[o * total + offset..o * total + offset + block],
                            );
                        }
                    });
                    offset += block;
                }
            }
            OpKind::Reshape { .. } => acc(0, &mut |b| add_into(b, g)),
            OpKind::Slice { axis, start, end } => {
                let x = &nodes[rec.inputs[0]];
                let outer: usize = x.shape[..*axis].iter().product();
                let inner: usize = x.shape[axis + 1..].iter().product();
                let ext = x.shape[*axis];
                let width = (end - start) * inner;
                acc(0, &mut |b| {
                    for o in 0..outer {
                        let base = o * ext * inner + start * inner;
                        add_into(&mut b[base..base + width], &g[o * width..(o + 1) * width]);
                    }
                });
            }
            OpKind::Permute { axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(g, &out.shape, &inverse);
                acc(0, &mut |b| add_into(b, &back));
            }
            OpKind::Expand { .. } => {
                acc(0, &mut |b| {
                    let w = b.len();
                    for chunk in g.chunks(w) {
                        add_into(b, chunk);
                    }
                });
            }
            OpKind::Sigmoid => acc(0, &mut |b| {
                for ((x, gv), y) in b.iter_mut().zip(g).zip(&out.data) {
                    *x += gv * y * (1.0 - y);
                }
            }),
            OpKind::Tanh => acc(0, &mut |b| {
                for ((x, gv), y) in b.iter_mut().zip(g).zip(&out.data) {
                    *x += gv * (1.0 - y * y);
                }
            }),
            OpKind::Relu => {
                let input = &nodes[rec.inputs[0]].data;
                acc(0, &mut |b| {
                    for ((x, gv), v) in b.iter_mut().zip(g).zip(input) {
                        if *v > 0.0 {
                            *x += gv;
                        }
                    }
                });
            }
            OpKind::Scale(c) => acc(0, &mut |b| {
                for (x, gv) in b.iter_mut().zip(g) {
                    *x += c * gv;
                }
            }),
            OpKind::LayerNorm { .. } => {
                let width = *out.shape.last().unwrap();
                acc(0, &mut |b| {
                    for (r, inv) in rec.saved.iter().enumerate() {
                        let span = r * width..(r + 1) * width;
                        let (gr, yr) = (&g[span.clone()], &out.data[span.clone()]);
                        let g_mean = gr.iter().sum::<f64>() / width as f64;
                        let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                        for ((x, gv), y) in b[span].iter_mut().zip(gr).zip(yr) {
                            *x += inv * (gv - g_mean - y * gy_mean);
                        }
                    }
                });
            }
            OpKind::SoftmaxLastAxis => {
                let width = *out.shape.last().unwrap();
                acc(0, &mut |b| {
                    for ((bx, gr), yr) in b.chunks_mut(width).zip(g.chunks(width)).zip(out.data.chunks(width)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((x, gv), y) in bx.iter_mut().zip(gr).zip(yr) {
                            *x += y * (gv - dot);
                        }
                    }
                });
            }
            OpKind::Mean => {
                let n = nodes[rec.inputs[0]].data.len() as f64;
                acc(0, &mut |b| b.iter_mut().for_each(|x| *x += g[0] / n));
            }
            OpKind::Sum => acc(0, &mut |b| b.iter_mut().for_each(|x| *x += g[0])),
            OpKind::ScalarMul => {
                let (x, s) = (&nodes[rec.inputs[0]].data, nodes[rec.inputs[1]].data[0]);
                acc(0, &mut |b| {
                    for (bx, gv) in b.iter_mut().zip(g) {
                        *bx += gv * s;
                    }
                });
                acc(1, &mut |b| b[0] += g.iter().zip(x).map(|(a, c)| a * c).sum::<f64>());
            }
            OpKind::MaskedFill { mask, .. } => acc(0, &mut |b| {
                for (bb, gb) in b.chunks_mut(mask.len()).zip(g.chunks(mask.len())) {
                    for ((x, gv), &m) in bb.iter_mut().zip(gb).zip(mask.iter()) {
                        if !m {
                            *x += gv;
                        }
                    }
                }
            }),
            OpKind::Gather { ids } => {
                let width = out.shape[1];
                acc(0, &mut |b| {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut b[id * width..(id + 1) * width], &g[row * width..(row + 1) * width]);
                    }
                });
            }
            OpKind::CrossEntropy { labels } => {
                let classes = nodes[rec.inputs[0]].shape[1];
                let scale = g[0] / labels.len() as f64;
                acc(0, &mut |b| {
                    for (r, &label) in labels.iter().enumerate() {
                        let span = r * classes..(r + 1) * classes;
                        for (c, (x, p)) in b[span.clone()].iter_mut().zip(&rec.saved[span]).enumerate() {
                            let target = if c == label { 1.0 } else { 0.0 };
                            *x += scale * (p - target);
                        }
                    }
                });
            }
        }
    }

    // Convenience wrappers. Each is `apply` with the matching kind.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MulElementwise, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, parts)
    }

    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let axis = self.shape(*first).len() - 1;
        self.concat(parts, axis)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::Slice { axis, start, end }, &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(OpKind::Permute { axes: axes.to_vec() }, &[x])
    }

    pub fn expand(&mut self, x: Var, count: usize) -> Result<Var> {
        self.apply(OpKind::Expand { count }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn layernorm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(OpKind::LayerNorm { eps }, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::SoftmaxLastAxis, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(OpKind::ScalarMul, &[x, s])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn masked_fill(&mut self, x: Var, mask: Arc<[bool]>, value: f64) -> Result<Var> {
        self.apply(OpKind::MaskedFill { mask, value }, &[x])
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.apply(OpKind::Gather { ids: ids.into() }, &[table])
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(OpKind::CrossEntropy { labels: labels.into() }, &[logits])
    }

    /// `x·w + b` for 2-D `x`, with `b` expanded over the rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let rows = self.shape(y)[0];
                let bb = self.expand(b, rows)?;
                self.add(y, bb)
            }
            None => Ok(y),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Ok((1, a[0], a[1], b[1])),
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Ok((a[0], a[1], a[2], b[2])),
        _ => Err(Error::shape("matmul", format!("{a:?} x {b:?}"))),
    }
}

fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *cv += av * bv;
            }
        }
    }
}

// dA[i,p] += Σ_j dC[i,j]·B[p,j]
fn matmul_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &dc[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// dB[p,j] += Σ_i A[i,p]·dC[i,j]
fn matmul_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &dc[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (d, gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}
