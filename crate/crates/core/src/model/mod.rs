//! Network descriptions, weights, training and weight randomization.
//!
//! ReLU layers are addressed by their 0-based ordinal among all ReLUs of the
//! network, which is how layer sets for the perceptual penalty are named.

mod forward;
mod train;

pub use forward::{forward_full, predict, Forward};
pub use train::{accuracy, train, TrainConfig};

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool2,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl Layer {
    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            Layer::Conv2d { .. } | Layer::BatchNorm { .. } | Layer::Linear { .. }
        )
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]],
            // gamma, beta, running mean, running var
            Layer::BatchNorm { channels } => vec![vec![channels]; 4],
            Layer::Linear {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Final layer is linear; logits are class scores.
    SingleLabel,
    /// Final layer is a conv producing per-class response maps; the class
    /// score is the spatial max of its map.
    MultiLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    pub num_classes: usize,
    pub mode: Mode,
}

impl NetworkSpec {
    /// The reference desk-scale classifier: two conv-bn-relu pairs, pool,
    /// two more, pool, then a two-layer MLP head. Five ReLUs in total.
    pub fn mini_vgg(num_classes: usize, size: usize) -> Self {
        let mut layers = trunk();
        let s = size / 4;
        layers.extend([
            Layer::Flatten,
            Layer::Linear {
                in_features: 32 * s * s,
                out_features: 64,
            },
            Layer::Relu,
            Layer::Linear {
                in_features: 64,
                out_features: num_classes,
            },
        ]);
        Self {
            input_shape: [3, size, size],
            layers,
            num_classes,
            mode: Mode::SingleLabel,
        }
    }

    /// Fully convolutional multi-label variant: the MiniVGG trunk, a 1x1
    /// conv-relu, and a 1x1 conv emitting one response map per class.
    pub fn mini_vgg_detector(num_classes: usize, size: usize) -> Self {
        let mut layers = trunk();
        layers.extend([
            Layer::Conv2d {
                in_channels: 32,
                out_channels: 64,
                kernel: 1,
                stride: 1,
                pad: 0,
            },
            Layer::Relu,
            Layer::Conv2d {
                in_channels: 64,
                out_channels: num_classes,
                kernel: 1,
                stride: 1,
                pad: 0,
            },
        ]);
        Self {
            input_shape: [3, size, size],
            layers,
            num_classes,
            mode: Mode::MultiLabel,
        }
    }

    /// No flatten or linear layer, so any spatial size the layers can
    /// process is accepted.
    pub fn is_fully_convolutional(&self) -> bool {
        !self.layers.iter().any(|l| matches!(l, Layer::Flatten | Layer::Linear { .. }))
    }

    /// Whether `shape` is a valid input: exactly `input_shape`, or for a
    /// fully convolutional net any `[C,H,W]` with the same channel count.
    pub fn accepts(&self, shape: &[usize]) -> bool {
        if shape == self.input_shape {
            return true;
        }
        if !self.is_fully_convolutional() || shape.len() != 3 || shape[0] != self.input_shape[0] {
            return false;
        }
        let probe = NetworkSpec {
            input_shape: [shape[0], shape[1], shape[2]],
            ..self.clone()
        };
        probe.layer_shapes().is_ok()
    }

    /// Layer positions of the ReLUs, indexed by ReLU ordinal.
    pub fn relu_index(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Relu))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_relus(&self) -> usize {
        self.relu_index().len()
    }

    /// Output shape after every layer, validating the whole stack.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (pos, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::shape(format!("layer {pos} ({layer:?}): {msg}"));
            shape = match *layer {
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if shape.len() != 3 || shape[0] != in_channels {
                        return Err(err(format!("input shape {shape:?}")));
                    }
                    if stride == 0 || kernel % 2 == 0 || shape[1] + 2 * pad < kernel {
                        return Err(err("bad kernel geometry".into()));
                    }
                    let oh = (shape[1] + 2 * pad - kernel) / stride + 1;
                    let ow = (shape[2] + 2 * pad - kernel) / stride + 1;
                    vec![out_channels, oh, ow]
                }
                Layer::BatchNorm { channels } => {
                    if shape.len() != 3 || shape[0] != channels {
                        return Err(err(format!("input shape {shape:?}")));
                    }
                    shape
                }
                Layer::Relu => shape,
                Layer::MaxPool2 => {
                    if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                        return Err(err(format!("input shape {shape:?}")));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Linear {
                    in_features,
                    out_features,
                } => {
                    if shape != [in_features] {
                        return Err(err(format!("input shape {shape:?}")));
                    }
                    vec![out_features]
                }
            };
            out.push(shape.clone());
        }
        let last = out
            .last()
            .ok_or_else(|| Error::invalid("network has no layers"))?;
        match self.mode {
            Mode::SingleLabel => {
                if !matches!(self.layers.last(), Some(Layer::Linear { .. }))
                    || last != &[self.num_classes]
                {
                    return Err(Error::shape(format!(
                        "single-label net must end in linear({}), ends with shape {last:?}",
                        self.num_classes
                    )));
                }
            }
            Mode::MultiLabel => {
                if !matches!(self.layers.last(), Some(Layer::Conv2d { .. }))
                    || last.len() != 3
                    || last[0] != self.num_classes
                {
                    return Err(Error::shape(format!(
                        "multi-label net must end in a conv with {} maps, ends with shape {last:?}",
                        self.num_classes
                    )));
                }
            }
        }
        Ok(out)
    }
}

fn trunk() -> Vec<Layer> {
    let conv = |i, o| Layer::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    vec![
        conv(3, 16),
        Layer::BatchNorm { channels: 16 },
        Layer::Relu,
        conv(16, 16),
        Layer::BatchNorm { channels: 16 },
        Layer::Relu,
        Layer::MaxPool2,
        conv(16, 32),
        Layer::BatchNorm { channels: 32 },
        Layer::Relu,
        conv(32, 32),
        Layer::BatchNorm { channels: 32 },
        Layer::Relu,
        Layer::MaxPool2,
    ]
}

/// Set of ReLU ordinals whose activations enter the perceptual penalty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSet {
    /// Ordinals `start..end`; empty when `start == end`.
    Range { start: usize, end: usize },
    Explicit(BTreeSet<usize>),
}

impl LayerSet {
    pub fn range(start: usize, end: usize) -> Self {
        LayerSet::Range { start, end }
    }

    pub fn empty() -> Self {
        LayerSet::Range { start: 0, end: 0 }
    }

    pub fn ordinals(&self) -> Vec<usize> {
        match self {
            LayerSet::Range { start, end } => (*start..*end).collect(),
            LayerSet::Explicit(set) => set.iter().copied().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ordinals().is_empty()
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let n = spec.num_relus();
        if let LayerSet::Range { start, end } = self {
            if start > end {
                return Err(Error::invalid(format!("layer range {start}..{end} is reversed")));
            }
        }
        if let Some(bad) = self.ordinals().into_iter().find(|&o| o >= n) {
            return Err(Error::invalid(format!(
                "ReLU ordinal {bad} does not exist (network has {n} ReLUs)"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSet::Range { start, end } => write!(f, "{start}..{end}"),
            LayerSet::Explicit(set) => {
                let parts: Vec<String> = set.iter().map(|o| o.to_string()).collect();
                write!(f, "{{{}}}", parts.join(","))
            }
        }
    }
}

/// A network description with its weights. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    /// Per-layer parameter tensors (empty for parameter-free layers).
    params: Vec<Vec<Tensor>>,
    /// Accuracy on the training set after the last epoch, when trained.
    pub train_accuracy: Option<f64>,
}

impl Network {
    /// Builds a network from explicit weights, checking every shape.
    pub fn from_params(spec: NetworkSpec, params: Vec<Vec<Tensor>>) -> Result<Self> {
        spec.layer_shapes()?;
        if params.len() != spec.layers.len() {
            return Err(Error::shape(format!(
                "{} parameter groups for {} layers",
                params.len(),
                spec.layers.len()
            )));
        }
        for (pos, (layer, group)) in spec.layers.iter().zip(&params).enumerate() {
            let want = layer.param_shapes();
            let got: Vec<Vec<usize>> = group.iter().map(|t| t.shape().to_vec()).collect();
            if want != got {
                return Err(Error::shape(format!(
                    "layer {pos}: expected parameter shapes {want:?}, got {got:?}"
                )));
            }
            if let Layer::BatchNorm { .. } = layer {
                if group[3].data().iter().any(|v| *v < 0.0) {
                    return Err(Error::invalid(format!("layer {pos}: negative batchnorm variance")));
                }
            }
        }
        Ok(Self {
            spec,
            params,
            train_accuracy: None,
        })
    }

    /// Fresh untrained weights. Each layer draws from its own stream of
    /// `seed`, so re-initializing a suffix reproduces exactly these values.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.layer_shapes()?;
        let params = spec
            .layers
            .iter()
            .enumerate()
            .map(|(pos, l)| init_layer(l, pos, seed))
            .collect();
        Self::from_params(spec, params)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.spec.mode
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn params(&self) -> &[Vec<Tensor>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Vec<Tensor>] {
        &mut self.params
    }

    /// Layer positions that carry parameters.
    pub fn parameterized_positions(&self) -> Vec<usize> {
        self.spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| i)
            .collect()
    }

    /// Copy of the network whose parameterized layers at positions
    /// `>= layer_position` are re-drawn from the untrained initializer.
    pub fn randomize_from(&self, layer_position: usize, seed: u64) -> Network {
        let mut out = self.clone();
        for (pos, layer) in self.spec.layers.iter().enumerate().skip(layer_position) {
            out.params[pos] = init_layer(layer, pos, seed);
        }
        if layer_position < self.spec.layers.len() {
            out.train_accuracy = None;
        }
        out
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut named = Vec::new();
        for (pos, group) in self.params.iter().enumerate() {
            for (k, t) in group.iter().enumerate() {
                named.push((format!("layer{pos}.{}", param_name(&self.spec.layers[pos], k)), t));
            }
        }
        let meta = json!({
            "spec": self.spec,
            "train_accuracy": self.train_accuracy,
        });
        container::write(path, &meta, &named)
    }

    /// Loads weights saved by [`save_weights`](Self::save_weights); the stored
    /// spec must equal `spec`.
    pub fn load_weights(spec: &NetworkSpec, path: &Path) -> Result<Network> {
        let (meta, tensors) = container::read(path)?;
        let stored: NetworkSpec = serde_json::from_value(meta["spec"].clone())
            .map_err(|e| Error::format(path, format!("spec in header: {e}")))?;
        if &stored != spec {
            return Err(Error::shape(format!(
                "weight file {} was written for a different network spec",
                path.display()
            )));
        }
        let mut it = tensors.into_iter();
        let mut params = Vec::with_capacity(spec.layers.len());
        for (pos, layer) in spec.layers.iter().enumerate() {
            let mut group = Vec::new();
            for k in 0..layer.param_shapes().len() {
                let want = format!("layer{pos}.{}", param_name(layer, k));
                match it.next() {
                    Some((name, t)) if name == want => group.push(t),
                    Some((name, _)) => {
                        return Err(Error::format(path, format!("expected tensor {want}, found {name}")))
                    }
                    None => return Err(Error::format(path, format!("missing tensor {want}"))),
                }
            }
            params.push(group);
        }
        if let Some((name, _)) = it.next() {
            return Err(Error::format(path, format!("unexpected extra tensor {name}")));
        }
        let mut net = Network::from_params(spec.clone(), params)?;
        net.train_accuracy = meta["train_accuracy"].as_f64();
        Ok(net)
    }

    /// Reads the spec stored in a weight file header, then loads the weights.
    pub fn load(path: &Path) -> Result<Network> {
        let (meta, _) = container::read(path)?;
        let spec: NetworkSpec = serde_json::from_value(meta["spec"].clone())
            .map_err(|e| Error::format(path, format!("spec in header: {e}")))?;
        Self::load_weights(&spec, path)
    }
}

fn param_name(layer: &Layer, k: usize) -> &'static str {
    match layer {
        Layer::BatchNorm { .. } => ["gamma", "beta", "running_mean", "running_var"][k],
        _ => ["weight", "bias"][k],
    }
}

/// Uniform(-s, s) with s = sqrt(6 / fan_in) for conv and linear weights,
/// zero biases, and identity batch norm.
fn init_layer(layer: &Layer, position: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(position as u64);
    let mut uniform = |shape: Vec<usize>, fan_in: usize| {
        let s = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-s..s)).collect();
        Tensor::new(shape, data).expect("init shape")
    };
    match *layer {
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => vec![
            uniform(
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
            ),
            Tensor::zeros(&[out_channels]),
        ],
        Layer::Linear {
            in_features,
            out_features,
        } => vec![
            uniform(vec![out_features, in_features], in_features),
            Tensor::zeros(&[out_features]),
        ],
        Layer::BatchNorm { channels } => vec![
            Tensor::full(&[channels], 1.0),
            Tensor::zeros(&[channels]),
            Tensor::zeros(&[channels]),
            Tensor::full(&[channels], 1.0),
        ],
        _ => vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mini_vgg_has_five_relus_and_valid_shapes() {
        let spec = NetworkSpec::mini_vgg(4, 32);
        assert_eq!(spec.num_relus(), 5);
        assert_eq!(spec.relu_index(), vec![2, 5, 9, 12, 16]);
        let shapes = spec.layer_shapes().unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![4]);
        assert_eq!(shapes[13], vec![32, 8, 8]);
    }

    #[test]
    fn detector_ends_in_class_maps() {
        let spec = NetworkSpec::mini_vgg_detector(4, 32);
        assert_eq!(spec.layer_shapes().unwrap().last().unwrap(), &vec![4, 8, 8]);
        assert_eq!(spec.num_relus(), 5);
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let spec = NetworkSpec::mini_vgg(3, 32);
        let a = Network::init(spec.clone(), 7).unwrap();
        let b = Network::init(spec.clone(), 7).unwrap();
        let c = Network::init(spec, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_scale_respects_fan_in() {
        let net = Network::init(NetworkSpec::mini_vgg(3, 32), 1).unwrap();
        let w = &net.params()[0][0];
        let s = (6.0f64 / 27.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < s));
        assert!(w.max() > 0.8 * s);
    }

    #[test]
    fn randomize_from_contract() {
        let spec = NetworkSpec::mini_vgg(3, 32);
        let trained = Network::init(spec.clone(), 1).unwrap();
        // past the end: unchanged
        assert_eq!(trained.randomize_from(spec.layers.len(), 5), trained);
        // from zero: a fresh init with that seed
        let mut fresh = Network::init(spec.clone(), 5).unwrap();
        fresh.train_accuracy = None;
        assert_eq!(trained.randomize_from(0, 5), fresh);
        // suffix only
        let r = trained.randomize_from(7, 5);
        for pos in 0..7 {
            assert_eq!(r.params()[pos], trained.params()[pos]);
        }
        assert_ne!(r.params()[7], trained.params()[7]);
        assert_eq!(r.params()[7], fresh.params()[7]);
    }

    #[test]
    fn layer_set_validation() {
        let spec = NetworkSpec::mini_vgg(3, 32);
        assert!(LayerSet::range(1, 5).validate(&spec).is_ok());
        assert!(LayerSet::range(1, 6).validate(&spec).is_err());
        assert!(LayerSet::range(3, 2).validate(&spec).is_err());
        assert!(LayerSet::Explicit([0, 4].into()).validate(&spec).is_ok());
        assert!(LayerSet::Explicit([5].into()).validate(&spec).is_err());
        assert!(LayerSet::range(2, 2).is_empty());
        assert_eq!(LayerSet::range(1, 3).to_string(), "1..3");
    }

    #[test]
    fn from_params_rejects_wrong_shapes() {
        let spec = NetworkSpec::mini_vgg(3, 32);
        let mut params = Network::init(spec.clone(), 0).unwrap().params().to_vec();
        params[0][1] = Tensor::zeros(&[15]);
        assert!(matches!(Network::from_params(spec, params), Err(Error::Shape(_))));
    }
}
