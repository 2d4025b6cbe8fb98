use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{build, predict};
use super::{Mode, Network, NetworkSpec};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr: 0.005,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Mini-batch SGD with momentum. Single-label nets minimize softmax cross
/// entropy on the primary label; multi-label nets minimize summed sigmoid
/// cross entropy of the per-class spatial-max scores against the label set.
///
/// Deterministic in `cfg.seed` (initialization and shuffling).
pub fn train(spec: &NetworkSpec, samples: &[Sample], cfg: &TrainConfig) -> Result<Network> {
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if let Some(s) = samples
        .iter()
        .find(|s| s.labels.iter().any(|&l| l >= spec.num_classes))
    {
        return Err(Error::invalid(format!(
            "sample {} has a label outside 0..{}",
            s.id, spec.num_classes
        )));
    }
    let mut net = Network::init(spec.clone(), cfg.seed)?;
    if cfg.epochs == 0 {
        return Ok(net);
    }
    let mut velocity: Vec<Vec<Vec<f64>>> = net
        .params()
        .iter()
        .map(|g| g.iter().map(|t| vec![0.0; t.len()]).collect())
        .collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_sum: Vec<Vec<Vec<f64>>> = velocity
                .iter()
                .map(|g| g.iter().map(|v| vec![0.0; v.len()]).collect())
                .collect();
            for &i in batch {
                let (loss, grads) = sample_gradient(&net, &samples[i])?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                epoch_loss += loss;
                for (acc_g, g_g) in grad_sum.iter_mut().zip(grads) {
                    for (acc, g) in acc_g.iter_mut().zip(g_g) {
                        for (a, v) in acc.iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            apply_update(&mut net, &mut velocity, &grad_sum, scale, cfg);
        }
        let mean_loss = epoch_loss / samples.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: mean_loss,
            });
        }
        log::info!("epoch {epoch}: mean loss {mean_loss:.5}");
    }
    net.train_accuracy = Some(accuracy(&net, samples)?);
    Ok(net)
}

fn sample_gradient(net: &Network, sample: &Sample) -> Result<(f64, Vec<Vec<Tensor>>)> {
    let mut fwd = build(net, &sample.image, false, true)?;
    let loss = match net.mode() {
        Mode::SingleLabel => fwd.graph.softmax_cross_entropy(fwd.logits, sample.label)?,
        Mode::MultiLabel => {
            let mut targets = vec![0.0; net.num_classes()];
            for &l in &sample.labels {
                targets[l] = 1.0;
            }
            fwd.graph.sigmoid_bce(fwd.logits, &targets)?
        }
    };
    let value = fwd.graph.value(loss).data()[0];
    let grads = fwd.graph.backward(loss)?;
    let per_layer = fwd
        .param_nodes
        .iter()
        .map(|ids| ids.iter().map(|&id| grads.get_or_zeros(&fwd.graph, id)).collect())
        .collect();
    Ok((value, per_layer))
}

fn apply_update(
    net: &mut Network,
    velocity: &mut [Vec<Vec<f64>>],
    grad_sum: &[Vec<Vec<f64>>],
    scale: f64,
    cfg: &TrainConfig,
) {
    for ((group, vel_g), grad_g) in net.params_mut().iter_mut().zip(velocity).zip(grad_sum) {
        // batch-norm running statistics carry no gradient
        for ((param, vel), grad) in group.iter_mut().zip(vel_g.iter_mut()).zip(grad_g) {
            let mut data = param.data().to_vec();
            for ((w, v), g) in data.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = cfg.momentum * *v + g * scale;
                *w -= cfg.lr * *v;
            }
            *param = Tensor::new(param.shape().to_vec(), data).expect("same shape");
        }
    }
}

/// Fraction of samples classified correctly: argmax equals the label in
/// single-label mode; the positive-score set equals the label set otherwise.
pub fn accuracy(net: &Network, samples: &[Sample]) -> Result<f64> {
    let mut correct = 0usize;
    for s in samples {
        let logits = predict(net, &s.image)?;
        let ok = match net.mode() {
            Mode::SingleLabel => logits.argmax() == s.label,
            Mode::MultiLabel => {
                let predicted: Vec<usize> = (0..logits.len()).filter(|&j| logits.data()[j] > 0.0).collect();
                let mut truth = s.labels.clone();
                truth.sort_unstable();
                truth.dedup();
                predicted == truth
            }
        };
        correct += usize::from(ok);
    }
    Ok(correct as f64 / samples.len() as f64)
}
