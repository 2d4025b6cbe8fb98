use super::{Layer, Mode, Network};
use crate::error::{Error, Result};
use crate::tensor::ops::BATCHNORM_EPS;
use crate::tensor::{CompGraph, NodeId, Tensor};

/// A recorded forward pass: logits, every ReLU output and the graph that
/// produced them.
#[derive(Debug, Clone)]
pub struct Forward {
    pub graph: CompGraph,
    pub input: NodeId,
    /// Class scores `[K]`. For multi-label nets, the spatial max of each map.
    pub logits: NodeId,
    /// Per-class response maps `[K,h,w]` of a multi-label net.
    pub response_map: Option<NodeId>,
    /// ReLU outputs, indexed by ReLU ordinal.
    pub activations: Vec<NodeId>,
    pub(crate) param_nodes: Vec<Vec<NodeId>>,
}

impl Forward {
    pub fn logits(&self) -> &Tensor {
        self.graph.value(self.logits)
    }

    pub fn activation(&self, ordinal: usize) -> &Tensor {
        self.graph.value(self.activations[ordinal])
    }
}

/// Forward pass with the input as a differentiable leaf and the weights as
/// constants.
pub fn forward_full(net: &Network, x: &Tensor) -> Result<Forward> {
    build(net, x, true, false)
}

/// Class scores only, without gradient bookkeeping.
pub fn predict(net: &Network, x: &Tensor) -> Result<Tensor> {
    let fwd = build(net, x, false, false)?;
    Ok(fwd.logits().clone())
}

pub(crate) fn build(net: &Network, x: &Tensor, input_grad: bool, params_grad: bool) -> Result<Forward> {
    let spec = net.spec();
    if !spec.accepts(x.shape()) {
        return Err(Error::shape(format!(
            "network expects input {:?}, got {:?}",
            spec.input_shape,
            x.shape()
        )));
    }
    let mut g = CompGraph::new();
    let input = if input_grad {
        g.input(x.clone())
    } else {
        g.constant(x.clone())
    };
    let mut param_nodes = Vec::with_capacity(spec.layers.len());
    let mut activations = Vec::new();
    let mut h = input;
    for (layer, params) in spec.layers.iter().zip(net.params()) {
        let mut leaf = |t: &Tensor| {
            if params_grad {
                g.input(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let ids: Vec<NodeId> = match layer {
            // running statistics are never trained
            Layer::BatchNorm { .. } => params[..2].iter().map(&mut leaf).collect(),
            _ => params.iter().map(&mut leaf).collect(),
        };
        h = match *layer {
            Layer::Conv2d { stride, pad, .. } => g.conv2d(h, ids[0], ids[1], stride, pad)?,
            Layer::BatchNorm { .. } => {
                g.batchnorm(h, ids[0], ids[1], &params[2], &params[3], BATCHNORM_EPS)?
            }
            Layer::Relu => {
                let r = g.relu(h)?;
                activations.push(r);
                r
            }
            Layer::MaxPool2 => g.maxpool2(h)?,
            Layer::Flatten => g.flatten(h)?,
            Layer::Linear { .. } => g.linear(h, ids[0], ids[1])?,
        };
        param_nodes.push(ids);
    }
    let (logits, response_map) = match net.mode() {
        Mode::SingleLabel => (h, None),
        Mode::MultiLabel => (g.channel_max(h)?, Some(h)),
    };
    Ok(Forward {
        graph: g,
        input,
        logits,
        response_map,
        activations,
        param_nodes,
    })
}
