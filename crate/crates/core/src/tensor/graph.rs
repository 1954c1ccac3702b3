use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::{split_at_axis, Tensor};
use crate::error::{Error, Result};

/// Saved forward context for one recorded operation.
pub(crate) enum Op {
    Leaf,
    Conv3d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    MaxPool3d {
        input: usize,
        argmax: Vec<usize>,
    },
    MatMul {
        a: usize,
        b: usize,
        dims: [usize; 4],
    },
    Transpose {
        input: usize,
    },
    Softmax {
        input: usize,
        axis: usize,
    },
    LayerNorm {
        input: usize,
        gain: usize,
        shift: usize,
        axis: usize,
        xhat: Vec<f32>,
        rstd: Vec<f64>,
    },
    ChannelNorm {
        input: usize,
        gain: usize,
        shift: usize,
        xhat: Vec<f32>,
        rstd: Vec<f64>,
    },
    Relu {
        input: usize,
    },
    Sigmoid {
        input: usize,
    },
    Tanh {
        input: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: f32,
    },
    ScaleBy {
        input: usize,
        scalar: usize,
    },
    AddBias {
        input: usize,
        bias: usize,
        axis: usize,
    },
    Dropout {
        input: usize,
        mask: Vec<f32>,
    },
    Reshape {
        input: usize,
    },
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    IndexSelect {
        input: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    MeanAxis {
        input: usize,
        axis: usize,
    },
    Sum {
        input: usize,
    },
    MaxAxis {
        input: usize,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    BceWithLogits {
        logits: usize,
        targets: Vec<f32>,
    },
    RoiAlign {
        input: usize,
        batch: usize,
        taps: Vec<[(usize, f32); 4]>,
    },
}

/// Public name of an operation kind, used by the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Conv3d,
    MaxPool3d,
    MatMul,
    Transpose,
    Softmax,
    LayerNorm,
    ChannelNorm,
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Sub,
    Mul,
    Scale,
    ScaleBy,
    AddBias,
    Dropout,
    Reshape,
    Narrow,
    Concat,
    IndexSelect,
    MeanAxis,
    Sum,
    MaxAxis,
    CrossEntropy,
    BceWithLogits,
    RoiAlign,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 27] = [
        OpKind::Conv3d,
        OpKind::MaxPool3d,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::ChannelNorm,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::ScaleBy,
        OpKind::AddBias,
        OpKind::Dropout,
        OpKind::Reshape,
        OpKind::Narrow,
        OpKind::Concat,
        OpKind::IndexSelect,
        OpKind::MeanAxis,
        OpKind::Sum,
        OpKind::MaxAxis,
        OpKind::CrossEntropy,
        OpKind::BceWithLogits,
        OpKind::RoiAlign,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv3d => "conv3d",
            OpKind::MaxPool3d => "maxpool3d",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layernorm",
            OpKind::ChannelNorm => "channel_norm",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::ScaleBy => "scale_by",
            OpKind::AddBias => "add_bias",
            OpKind::Dropout => "dropout",
            OpKind::Reshape => "reshape",
            OpKind::Narrow => "narrow",
            OpKind::Concat => "concat",
            OpKind::IndexSelect => "index_select",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Sum => "sum",
            OpKind::MaxAxis => "max_axis",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::RoiAlign => "roi_align",
        };
        f.write_str(s)
    }
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::MaxPool3d { .. } => OpKind::MaxPool3d,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::ChannelNorm { .. } => OpKind::ChannelNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::ScaleBy { .. } => OpKind::ScaleBy,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Concat { .. } => OpKind::Concat,
            Op::IndexSelect { .. } => OpKind::IndexSelect,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::Sum { .. } => OpKind::Sum,
            Op::MaxAxis { .. } => OpKind::MaxAxis,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
            Op::RoiAlign { .. } => OpKind::RoiAlign,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv3d {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::LayerNorm { input, gain, shift, .. } | Op::ChannelNorm { input, gain, shift, .. } => {
                vec![*input, *gain, *shift]
            }
            Op::ScaleBy { input, scalar } => vec![*input, *scalar],
            Op::AddBias { input, bias, .. } => vec![*input, *bias],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::CrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => vec![*logits],
            Op::MaxPool3d { input, .. }
            | Op::Transpose { input }
            | Op::Softmax { input, .. }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Tanh { input }
            | Op::Scale { input, .. }
            | Op::Dropout { input, .. }
            | Op::Reshape { input }
            | Op::Narrow { input, .. }
            | Op::IndexSelect { input, .. }
            | Op::MeanAxis { input, .. }
            | Op::Sum { input }
            | Op::MaxAxis { input, .. }
            | Op::RoiAlign { input, .. } => vec![*input],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// Node ids increase in creation order, so the node list is already a
/// topological order of the (acyclic) graph.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Arc::new(value), false)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Arc::new(value), true)
    }

    /// The node for a stored parameter; repeated calls return the same node,
    /// so the value is a snapshot taken on first use within this graph.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.push_leaf(store.shared(id), true);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    fn push_leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Operation kinds present in the graph, for coverage reporting.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        let mut kinds: Vec<OpKind> = self.nodes.borrow().iter().map(|n| n.op.kind()).collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", root.value.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !matches!(node.op, Op::Leaf) {
                backprop_node(&nodes, id, &dy, &mut grads)?;
            }
            grads[id] = Some(dy);
        }
        let grads: Vec<Option<Tensor>> = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        if let Some((i, _)) = grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| !g.is_finite()))
        {
            return Err(Error::NonFinite(format!(
                "gradient of node {i} ({})",
                nodes[i].op.kind()
            )));
        }
        let params = self.params.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradients of parameters that were used in the graph, sorted by id.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<(ParamId, &Tensor)> = self
            .params
            .iter()
            .filter_map(|&(p, n)| self.grads[n].as_ref().map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f32>>], id: usize, contrib: Vec<f32>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop_node(nodes: &[Node], id: usize, dy: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
    let node = &nodes[id];
    let y = &node.value;
    let val = |i: usize| Arc::clone(&nodes[i].value);
    let needs = |i: usize| nodes[i].requires_grad;
    let mut acc = |i: usize, g: Vec<f32>| accumulate(nodes, grads, i, g);
    match &node.op {
        Op::Leaf => {}
        Op::Conv3d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let (x, w) = (val(*input), val(*weight));
            let (gi, gw, gb) =
                kernels::conv3d_backward(geom, x.data(), cols, w.data(), dy, needs(*input), needs(*weight));
            if let Some(gi) = gi {
                acc(*input, gi);
            }
            if let Some(gw) = gw {
                acc(*weight, gw);
            }
            if let Some(b) = bias {
                acc(*b, gb);
            }
        }
        Op::MaxPool3d { input, argmax } => {
            let mut g = vec![0f32; nodes[*input].value.numel()];
            for (&i, &d) in argmax.iter().zip(dy) {
                g[i] += d;
            }
            acc(*input, g);
        }
        Op::MatMul { a, b, dims } => {
            let [batch, m, k, n] = *dims;
            if needs(*a) {
                acc(*a, kernels::matmul_grad_a(dy, val(*b).data(), batch, m, k, n));
            }
            if needs(*b) {
                acc(*b, kernels::matmul_grad_b(val(*a).data(), dy, batch, m, k, n));
            }
        }
        Op::Transpose { input } => {
            let shape = y.shape();
            let r = shape.len();
            let dyt = Tensor::from_parts(shape.to_vec(), dy.to_vec());
            let mut perm: Vec<usize> = (0..r).collect();
            perm.swap(r - 1, r - 2);
            acc(*input, dyt.permute(&perm)?.into_data());
        }
        Op::Softmax { input, axis } => {
            let (o, l, i) = split_at_axis(y.shape(), *axis);
            acc(*input, kernels::softmax_backward(y.data(), dy, o, l, i));
        }
        Op::LayerNorm {
            input,
            gain,
            shift,
            axis,
            xhat,
            rstd,
        } => {
            let shape = y.shape();
            let (outer, len, inner) = split_at_axis(shape, *axis);
            let gv = val(*gain);
            let mut dxhat = vec![0f64; dy.len()];
            let mut dgain = vec![0f64; len];
            let mut dshift = vec![0f64; len];
            for (f, (&d, &xh)) in dy.iter().zip(xhat.iter()).enumerate() {
                let j = (f / inner) % len;
                dxhat[f] = d as f64 * gv.data()[j] as f64;
                dgain[j] += d as f64 * xh as f64;
                dshift[j] += d as f64;
            }
            let slice = |s: usize| {
                let (o, i) = (s / inner, s % inner);
                (0..len).map(|j| (o * len + j) * inner + i).collect::<Vec<_>>()
            };
            debug_assert_eq!(rstd.len(), outer * inner);
            acc(*input, kernels::normalize_slices_backward(xhat, &dxhat, rstd, slice));
            acc(*gain, dgain.into_iter().map(|v| v as f32).collect());
            acc(*shift, dshift.into_iter().map(|v| v as f32).collect());
        }
        Op::ChannelNorm {
            input,
            gain,
            shift,
            xhat,
            rstd,
        } => {
            let shape = y.shape();
            let (n, c) = (shape[0], shape[1]);
            let per_c: usize = shape[2..].iter().product();
            let gv = val(*gain);
            let mut dxhat = vec![0f64; dy.len()];
            let mut dgain = vec![0f64; c];
            let mut dshift = vec![0f64; c];
            for (f, (&d, &xh)) in dy.iter().zip(xhat.iter()).enumerate() {
                let ch = (f / per_c) % c;
                dxhat[f] = d as f64 * gv.data()[ch] as f64;
                dgain[ch] += d as f64 * xh as f64;
                dshift[ch] += d as f64;
            }
            let slice = |s: usize| (s * c * per_c..(s + 1) * c * per_c).collect::<Vec<_>>();
            debug_assert_eq!(rstd.len(), n);
            acc(*input, kernels::normalize_slices_backward(xhat, &dxhat, rstd, slice));
            acc(*gain, dgain.into_iter().map(|v| v as f32).collect());
            acc(*shift, dshift.into_iter().map(|v| v as f32).collect());
        }
        Op::Relu { input } => {
            let x = val(*input);
            acc(
                *input,
                x.data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                    .collect(),
            );
        }
        Op::Sigmoid { input } => {
            acc(
                *input,
                y.data().iter().zip(dy).map(|(&s, &d)| d * s * (1.0 - s)).collect(),
            );
        }
        Op::Tanh { input } => {
            acc(
                *input,
                y.data().iter().zip(dy).map(|(&t, &d)| d * (1.0 - t * t)).collect(),
            );
        }
        Op::Add { a, b } => {
            acc(*a, dy.to_vec());
            acc(*b, dy.to_vec());
        }
        Op::Sub { a, b } => {
            acc(*a, dy.to_vec());
            acc(*b, dy.iter().map(|d| -d).collect());
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                acc(*a, bv.data().iter().zip(dy).map(|(x, d)| x * d).collect());
            }
            if needs(*b) {
                acc(*b, av.data().iter().zip(dy).map(|(x, d)| x * d).collect());
            }
        }
        Op::Scale { input, factor } => acc(*input, dy.iter().map(|d| d * factor).collect()),
        Op::ScaleBy { input, scalar } => {
            let (x, s) = (val(*input), val(*scalar));
            let s = s.data()[0];
            if needs(*scalar) {
                let ds: f64 = x.data().iter().zip(dy).map(|(&a, &d)| a as f64 * d as f64).sum();
                acc(*scalar, vec![ds as f32]);
            }
            acc(*input, dy.iter().map(|d| d * s).collect());
        }
        Op::AddBias { input, bias, axis } => {
            let (_, len, inner) = split_at_axis(y.shape(), *axis);
            let mut db = vec![0f64; len];
            for (f, &d) in dy.iter().enumerate() {
                db[(f / inner) % len] += d as f64;
            }
            acc(*input, dy.to_vec());
            acc(*bias, db.into_iter().map(|v| v as f32).collect());
        }
        Op::Dropout { input, mask } => acc(*input, dy.iter().zip(mask).map(|(d, m)| d * m).collect()),
        Op::Reshape { input } => acc(*input, dy.to_vec()),
        Op::Narrow { input, axis, start } => {
            let in_shape = nodes[*input].value.shape();
            let (outer, in_len, inner) = split_at_axis(in_shape, *axis);
            let len = y.shape()[*axis];
            let mut g = vec![0f32; nodes[*input].value.numel()];
            for o in 0..outer {
                let src = &dy[o * len * inner..][..len * inner];
                g[(o * in_len + start) * inner..][..len * inner].copy_from_slice(src);
            }
            acc(*input, g);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_at_axis(y.shape(), *axis);
            let mut offset = 0;
            for &i in inputs {
                let len = nodes[i].value.shape()[*axis];
                let mut g = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    g.extend_from_slice(&dy[(o * total + offset) * inner..][..len * inner]);
                }
                offset += len;
                acc(i, g);
            }
        }
        Op::IndexSelect { input, axis, indices } => {
            let in_shape = nodes[*input].value.shape();
            let (outer, in_len, inner) = split_at_axis(in_shape, *axis);
            let mut g = vec![0f32; nodes[*input].value.numel()];
            for o in 0..outer {
                for (j, &src) in indices.iter().enumerate() {
                    let from = &dy[(o * indices.len() + j) * inner..][..inner];
                    let to = &mut g[(o * in_len + src) * inner..][..inner];
                    for (t, f) in to.iter_mut().zip(from) {
                        *t += f;
                    }
                }
            }
            acc(*input, g);
        }
        Op::MeanAxis { input, axis } => {
            let in_shape = nodes[*input].value.shape();
            let (outer, len, inner) = split_at_axis(in_shape, *axis);
            let mut g = vec![0f32; nodes[*input].value.numel()];
            let inv = 1.0 / len as f32;
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        g[(o * len + j) * inner + i] = dy[o * inner + i] * inv;
                    }
                }
            }
            acc(*input, g);
        }
        Op::Sum { input } => acc(*input, vec![dy[0]; nodes[*input].value.numel()]),
        Op::MaxAxis { input, argmax, .. } => {
            let mut g = vec![0f32; nodes[*input].value.numel()];
            for (&i, &d) in argmax.iter().zip(dy) {
                g[i] += d;
            }
            acc(*input, g);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let rows = targets.len();
            let c = probs.len() / rows;
            let scale = dy[0] / rows as f32;
            let mut g = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                g[r * c + t] -= 1.0;
            }
            g.iter_mut().for_each(|v| *v *= scale);
            acc(*logits, g);
        }
        Op::BceWithLogits { logits, targets } => {
            let z = val(*logits);
            let rows = if z.rank() >= 2 { z.shape()[0] } else { 1 };
            let scale = dy[0] / rows as f32;
            let g = z
                .data()
                .iter()
                .zip(targets)
                .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                .collect();
            acc(*logits, g);
        }
        Op::RoiAlign { input, batch, taps } => {
            let in_shape = nodes[*input].value.shape();
            let (c, t, h, w) = (in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
            let plane = h * w;
            let cells = taps.len();
            let mut g = vec![0f32; nodes[*input].value.numel()];
            for ci in 0..c {
                for ti in 0..t {
                    let base = ((batch * c + ci) * t + ti) * plane;
                    let d_row = &dy[(ci * t + ti) * cells..][..cells];
                    for (cell, &d) in taps.iter().zip(d_row) {
                        for &(p, wt) in cell {
                            g[base + p] += wt * d;
                        }
                    }
                }
            }
            acc(*input, g);
        }
    }
    Ok(())
}

pub(crate) fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
