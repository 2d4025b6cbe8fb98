//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every node caches its forward value, so intermediate activations are
//! available after the forward pass without recomputation. Parents always
//! have smaller ids than their children; `backward` walks ids downwards.

use super::kernels::{self, ConvGeom};
use super::ops::{batchnorm_affine, conv_geom, linear_dims, pool_shape, softmax};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    Relu(NodeId),
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        k: usize,
        f: usize,
    },
    Reshape(NodeId),
    Sum(NodeId),
    SquaredDistance {
        input: NodeId,
        target: Tensor,
    },
    MaxOver {
        input: NodeId,
        chosen: usize,
    },
    ChannelMax {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Square(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    SigmoidBce {
        logits: NodeId,
        targets: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Linear { .. } => "linear",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::SquaredDistance { .. } => "squared_distance",
            Op::MaxOver { .. } => "max_over",
            Op::ChannelMax { .. } => "channel_max",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Square(_) => "square",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SigmoidBce { .. } => "sigmoid_bce",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::Linear {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Relu(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Square(a) => vec![*a],
            Op::MaxPool2 { input, .. }
            | Op::SquaredDistance { input, .. }
            | Op::MaxOver { input, .. }
            | Op::ChannelMax { input, .. } => vec![*input],
            Op::SoftmaxCrossEntropy { logits, .. } | Op::SigmoidBce { logits, .. } => {
                vec![*logits]
            }
            Op::Add(a, b) | Op::Sub(a, b) => vec![*a, *b],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Tape of tensor operations. Single-threaded; build one per forward pass.
#[derive(Debug, Clone, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar seed with respect to graph nodes.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seed w.r.t. `id`, or `None` if `id` does not depend on
    /// a differentiable leaf or does not feed the seed.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get), but returns zeros shaped like the node when the
    /// seed does not depend on it.
    pub fn get_or_zeros(&self, graph: &CompGraph, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
    }
}

impl CompGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (an input image or trainable weight).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Every node in recording order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push_raw(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_raw(op, value, needs_grad)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("node {} does not exist", id.0)));
        }
        Ok(())
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        for id in [input, weight, bias] {
            self.check(id)?;
        }
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = conv_geom(x.shape(), w.shape(), b.shape(), stride, pad)?;
        let mut out = vec![0.0; geom.c_out * geom.oh * geom.ow];
        kernels::conv2d_forward(&geom, x.data(), w.data(), b.data(), &mut out);
        let value = Tensor::new(vec![geom.c_out, geom.oh, geom.ow], out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            value,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = super::ops::relu(self.value(input));
        Ok(self.push(Op::Relu(input), value))
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input);
        let [c, oh, ow] = pool_shape(x.shape())?;
        let n = c * oh * ow;
        let mut out = vec![0.0; n];
        let mut argmax = vec![0; n];
        kernels::maxpool2_forward(c, 2 * oh, 2 * ow, x.data(), &mut out, &mut argmax);
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(Op::MaxPool2 { input, argmax }, value))
    }

    /// Inference-mode batch norm. `mean`/`var` are frozen statistics; `gamma`
    /// and `beta` are graph nodes and receive gradients when differentiable.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &Tensor,
        var: &Tensor,
        eps: f64,
    ) -> Result<NodeId> {
        for id in [input, gamma, beta] {
            self.check(id)?;
        }
        let x = self.value(input);
        let (gm, bt) = (self.value(gamma), self.value(beta));
        let inv_std = batchnorm_affine(x.shape(), mean, var, gm, bt, eps)?;
        let value = super::ops::batchnorm_eval(x, mean, var, gm, bt, eps)?;
        Ok(self.push(
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: mean.data().to_vec(),
                inv_std,
            },
            value,
        ))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        for id in [input, weight, bias] {
            self.check(id)?;
        }
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (k, f) = linear_dims(x, w.shape(), b.shape())?;
        let mut out = vec![0.0; k];
        kernels::linear_forward(k, f, x.data(), w.data(), b.data(), &mut out);
        Ok(self.push(
            Op::Linear {
                input,
                weight,
                bias,
                k,
                f,
            },
            Tensor::from_vec(out),
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).reshape(shape)?;
        Ok(self.push(Op::Reshape(input), value))
    }

    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let n = self.value(input).len();
        self.reshape(input, &[n])
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = Tensor::scalar(self.value(input).sum());
        Ok(self.push(Op::Sum(input), value))
    }

    /// `||input - target||^2` with `target` held constant.
    pub fn squared_distance(&mut self, input: NodeId, target: &Tensor) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input);
        x.expect_same_shape(target)?;
        let v: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(
            Op::SquaredDistance {
                input,
                target: target.clone(),
            },
            Tensor::scalar(v),
        ))
    }

    /// Maximum over the listed flat indices of `input`; the earliest listed
    /// index wins ties and alone receives the gradient.
    pub fn max_over(&mut self, input: NodeId, candidates: &[usize]) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input);
        let first = *candidates
            .first()
            .ok_or_else(|| Error::invalid("max_over needs at least one candidate"))?;
        if let Some(bad) = candidates.iter().find(|&&c| c >= x.len()) {
            return Err(Error::invalid(format!(
                "max_over index {bad} out of range for {} elements",
                x.len()
            )));
        }
        let mut chosen = first;
        for &c in &candidates[1..] {
            if x.data()[c] > x.data()[chosen] {
                chosen = c;
            }
        }
        let value = Tensor::scalar(x.data()[chosen]);
        Ok(self.push(Op::MaxOver { input, chosen }, value))
    }

    /// Single element `input[index]` as a scalar node.
    pub fn pick(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        self.max_over(input, &[index])
    }

    /// Spatial max per channel: `[K,H,W] -> [K]`.
    pub fn channel_max(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input);
        x.expect_rank(3, "channel_max input")?;
        let plane = x.shape()[1] * x.shape()[2];
        if plane == 0 {
            return Err(Error::shape("channel_max over empty spatial extent"));
        }
        let mut out = Vec::with_capacity(x.shape()[0]);
        let mut argmax = Vec::with_capacity(x.shape()[0]);
        for (k, chunk) in x.data().chunks(plane).enumerate() {
            let mut best = 0;
            for (i, &v) in chunk.iter().enumerate() {
                if v > chunk[best] {
                    best = i;
                }
            }
            out.push(chunk[best]);
            argmax.push(k * plane + best);
        }
        Ok(self.push(Op::ChannelMax { input, argmax }, Tensor::from_vec(out)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).scale(factor);
        Ok(self.push(Op::Scale(input, factor), value))
    }

    pub fn add_scalar(&mut self, input: NodeId, c: f64) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).map(|v| v + c);
        Ok(self.push(Op::AddScalar(input), value))
    }

    pub fn square(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).map(|v| v * v);
        Ok(self.push(Op::Square(input), value))
    }

    /// `-log softmax(logits)[label]` for a single example.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        self.check(logits)?;
        let z = self.value(logits);
        z.expect_rank(1, "cross-entropy logits")?;
        if label >= z.len() {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let probs = softmax(z.data());
        let m = z.max();
        let lse = m + z.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let value = Tensor::scalar(lse - z.data()[label]);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            value,
        ))
    }

    /// Summed binary cross-entropy with logits against 0/1 `targets`.
    pub fn sigmoid_bce(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        self.check(logits)?;
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::shape(format!(
                "bce: {} logits vs {} targets",
                z.len(),
                targets.len()
            )));
        }
        let v: f64 = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(
            Op::SigmoidBce {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::scalar(v),
        ))
    }

    /// Reverse-mode pass from a scalar node.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        self.check(seed)?;
        if self.value(seed).len() != 1 {
            return Err(Error::shape(format!(
                "backward seed must be scalar, got shape {:?}",
                self.value(seed).shape()
            )));
        }
        let n = seed.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[seed.0].needs_grad {
            grads[seed.0] = Some(vec![1.0]);
        }
        for k in (0..n).rev() {
            let (lower, upper) = grads.split_at_mut(k);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.pull_back(&self.nodes[k], g, lower);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("gradient shape")))
            .chain(std::iter::repeat(None).take(self.nodes.len() - n))
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, lower: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut [f64]> {
        let node = &self.nodes[id.0];
        if !node.needs_grad {
            return None;
        }
        Some(
            lower[id.0]
                .get_or_insert_with(|| vec![0.0; node.value.len()])
                .as_mut_slice(),
        )
    }

    fn pull_back(&self, node: &Node, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let w = self.value(*weight).data();
                if let Some(gi) = self.slot(lower, *input) {
                    kernels::conv2d_backward_input(geom, w, g, gi);
                }
                let need_w = self.nodes[weight.0].needs_grad;
                let need_b = self.nodes[bias.0].needs_grad;
                if need_w || need_b {
                    let mut gw = vec![0.0; w.len()];
                    let mut gb = vec![0.0; geom.c_out];
                    kernels::conv2d_backward_weight(geom, self.value(*input).data(), g, &mut gw, &mut gb);
                    if let Some(s) = self.slot(lower, *weight) {
                        add_into(s, &gw);
                    }
                    if let Some(s) = self.slot(lower, *bias) {
                        add_into(s, &gb);
                    }
                }
            }
            Op::Relu(input) => {
                let y = node.value.data();
                if let Some(gi) = self.slot(lower, *input) {
                    for ((d, &go), &v) in gi.iter_mut().zip(g).zip(y) {
                        if v > 0.0 {
                            *d += go;
                        }
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(gi) = self.slot(lower, *input) {
                    for (&idx, &go) in argmax.iter().zip(g) {
                        gi[idx] += go;
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let x = self.value(*input);
                let plane = x.shape()[1] * x.shape()[2];
                let gm = self.value(*gamma).data();
                if let Some(gi) = self.slot(lower, *input) {
                    for (c, (dst, src)) in gi.chunks_mut(plane).zip(g.chunks(plane)).enumerate() {
                        let s = gm[c] * inv_std[c];
                        for (d, &go) in dst.iter_mut().zip(src) {
                            *d += go * s;
                        }
                    }
                }
                if let Some(gg) = self.slot(lower, *gamma) {
                    for (c, (xs, gs)) in x.data().chunks(plane).zip(g.chunks(plane)).enumerate() {
                        let acc: f64 = xs.iter().zip(gs).map(|(&v, &go)| go * (v - mean[c])).sum();
                        gg[c] += acc * inv_std[c];
                    }
                }
                if let Some(gb) = self.slot(lower, *beta) {
                    for (c, gs) in g.chunks(plane).enumerate() {
                        gb[c] += gs.iter().sum::<f64>();
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
                k,
                f,
            } => {
                let w = self.value(*weight).data();
                if let Some(gi) = self.slot(lower, *input) {
                    kernels::linear_backward_input(*k, *f, w, g, gi);
                }
                let need_w = self.nodes[weight.0].needs_grad;
                let need_b = self.nodes[bias.0].needs_grad;
                if need_w || need_b {
                    let mut gw = vec![0.0; w.len()];
                    let mut gb = vec![0.0; *k];
                    kernels::linear_backward_weight(*k, *f, self.value(*input).data(), g, &mut gw, &mut gb);
                    if let Some(s) = self.slot(lower, *weight) {
                        add_into(s, &gw);
                    }
                    if let Some(s) = self.slot(lower, *bias) {
                        add_into(s, &gb);
                    }
                }
            }
            Op::Reshape(input) => {
                if let Some(gi) = self.slot(lower, *input) {
                    add_into(gi, g);
                }
            }
            Op::Sum(input) => {
                if let Some(gi) = self.slot(lower, *input) {
                    for d in gi.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SquaredDistance { input, target } => {
                let x = self.value(*input).data();
                if let Some(gi) = self.slot(lower, *input) {
                    for ((d, &v), &t) in gi.iter_mut().zip(x).zip(target.data()) {
                        *d += 2.0 * (v - t) * g[0];
                    }
                }
            }
            Op::MaxOver { input, chosen } => {
                if let Some(gi) = self.slot(lower, *input) {
                    gi[*chosen] += g[0];
                }
            }
            Op::ChannelMax { input, argmax } => {
                if let Some(gi) = self.slot(lower, *input) {
                    for (&idx, &go) in argmax.iter().zip(g) {
                        gi[idx] += go;
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(lower, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(lower, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(lower, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(lower, *b) {
                    for (d, &go) in gb.iter_mut().zip(g) {
                        *d -= go;
                    }
                }
            }
            Op::Scale(input, factor) => {
                if let Some(gi) = self.slot(lower, *input) {
                    for (d, &go) in gi.iter_mut().zip(g) {
                        *d += factor * go;
                    }
                }
            }
            Op::AddScalar(input) => {
                if let Some(gi) = self.slot(lower, *input) {
                    add_into(gi, g);
                }
            }
            Op::Square(input) => {
                let x = self.value(*input).data();
                if let Some(gi) = self.slot(lower, *input) {
                    for ((d, &go), &v) in gi.iter_mut().zip(g).zip(x) {
                        *d += 2.0 * v * go;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(gi) = self.slot(lower, *logits) {
                    for (j, (d, &p)) in gi.iter_mut().zip(probs).enumerate() {
                        let t = if j == *label { 1.0 } else { 0.0 };
                        *d += g[0] * (p - t);
                    }
                }
            }
            Op::SigmoidBce { logits, targets } => {
                let z = self.value(*logits).data();
                if let Some(gi) = self.slot(lower, *logits) {
                    for ((d, &zv), &t) in gi.iter_mut().zip(z).zip(targets) {
                        let s = 1.0 / (1.0 + (-zv).exp());
                        *d += g[0] * (s - t);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
