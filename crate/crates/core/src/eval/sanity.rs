//! Cascading weight randomization: re-draw the last `k` weight layers and
//! watch how pointing accuracy responds.

use serde::Serialize;
use serde_json::{json, Value};

use super::report::Table;
use super::{game_items, perturb_items, pointing_game, Game, GameOptions, PointingTargets, Resize};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{Layer, Network};
use crate::perturb::PerturbConfig;
use crate::saliency;
use crate::tensor::Tensor;

/// Positions of the convolution and linear layers.
pub fn weight_layer_positions(net: &Network) -> Vec<usize> {
    net.spec()
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Conv2d { .. } | Layer::Linear { .. }))
        .map(|(i, _)| i)
        .collect()
}

/// Re-initializes the last `k` weight layers and everything after the
/// first of them.
pub fn randomize_last(net: &Network, k: usize, seed: u64) -> Result<Network> {
    let pos = weight_layer_positions(net);
    if k > pos.len() {
        return Err(Error::invalid(format!("cannot randomize {k} of {} weight layers", pos.len())));
    }
    if k == 0 {
        return Ok(net.clone());
    }
    Ok(net.randomize_from(pos[pos.len() - k], seed))
}

/// Mean fraction of the image covered by each item's target region: the
/// hit rate of a uniformly random point at tolerance 0.
pub fn chance_rate(samples: &[Sample], targets: PointingTargets) -> f64 {
    let mut opts = GameOptions::new(Game::Pointing);
    opts.targets = targets;
    let items = game_items(samples, &opts);
    let total: f64 = items
        .iter()
        .map(|(s, c)| {
            let area: usize = s.regions.iter().filter(|r| r.class == *c).map(|r| r.mask.area()).sum();
            area as f64 / (s.height() * s.width()) as f64
        })
        .sum();
    total / items.len().max(1) as f64
}

/// Least-squares slope of `values` against their index.
pub fn trend_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = values.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in values.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SanityPoint {
    pub depth: usize,
    pub accuracy: f64,
    pub difficult_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SanityReport {
    pub points: Vec<SanityPoint>,
    pub chance: f64,
}

impl SanityReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.accuracy).collect()
    }

    pub fn slope(&self) -> f64 {
        trend_slope(&self.accuracies())
    }

    /// Falls on average (negative slope, last below first) and ends within
    /// `band` of chance.
    pub fn degrades_to_chance(&self, band: f64) -> bool {
        let a = self.accuracies();
        match (a.first(), a.last()) {
            (Some(f), Some(l)) => self.slope() < 0.0 && l < f && (l - self.chance).abs() <= band,
            _ => false,
        }
    }

    pub fn table(&self, config_hash: &str) -> Table {
        let mut t = Table::new(&["depth", "config_hash", "accuracy", "difficult_accuracy"]);
        for p in &self.points {
            t.push(vec![
                p.depth.to_string(),
                config_hash.to_string(),
                p.accuracy.to_string(),
                p.difficult_accuracy.map(|v| v.to_string()).unwrap_or_default(),
            ]);
        }
        t
    }

    pub fn aggregates(&self) -> Value {
        json!({
            "points": self.points,
            "chance": self.chance,
            "slope": self.slope(),
        })
    }
}

/// Pointing accuracy at each randomization depth, explaining the primary
/// class with perturbation saliency blurred by `sigma`.
pub fn sanity_check(
    net: &Network,
    samples: &[Sample],
    depths: &[usize],
    seed: u64,
    cfg: &PerturbConfig,
    sigma: f64,
    tolerance_px: usize,
) -> Result<SanityReport> {
    if depths.is_empty() {
        return Err(Error::invalid("sanity check needs at least one depth"));
    }
    let opts = GameOptions::new(Game::Pointing);
    let items = game_items(samples, &opts);
    let mut points = Vec::with_capacity(depths.len());
    for &k in depths {
        let model = randomize_last(net, k, seed)?;
        let cache = perturb_items(&model, &items, cfg)?;
        let sal = |s: &Sample, class: usize| -> Result<Tensor> {
            let xp = &cache[&(s.id, class)];
            Ok(saliency::build(&s.image, xp, &model, class, sigma, false, false)?.values)
        };
        let r = pointing_game(samples, PointingTargets::Primary, &sal, tolerance_px, Resize::None)?;
        points.push(SanityPoint {
            depth: k,
            accuracy: r.accuracy(),
            difficult_accuracy: r.difficult_accuracy(),
        });
    }
    Ok(SanityReport {
        points,
        chance: chance_rate(samples, PointingTargets::Primary),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkSpec;

    #[test]
    fn slope_signs() {
        assert!(trend_slope(&[0.9, 0.7, 0.8, 0.3]) < 0.0);
        assert!((trend_slope(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-12);
        assert_eq!(trend_slope(&[0.5]), 0.0);
    }

    #[test]
    fn randomize_depths() {
        let net = Network::init(NetworkSpec::mini_vgg(3, 32), 5).unwrap();
        assert_eq!(weight_layer_positions(&net).len(), 6);
        assert_eq!(randomize_last(&net, 0, 9).unwrap(), net);
        let r2 = randomize_last(&net, 2, 9).unwrap();
        let pos = weight_layer_positions(&net);
        assert_eq!(r2.params()[pos[3]], net.params()[pos[3]]);
        assert_ne!(r2.params()[pos[4]], net.params()[pos[4]]);
        assert!(randomize_last(&net, 7, 9).is_err());
    }

    #[test]
    fn verdict() {
        let mk = |a: &[f64], chance| SanityReport {
            points: a
                .iter()
                .enumerate()
                .map(|(i, &v)| SanityPoint {
                    depth: i,
                    accuracy: v,
                    difficult_accuracy: None,
                })
                .collect(),
            chance,
        };
        assert!(mk(&[0.9, 0.6, 0.65, 0.3], 0.25).degrades_to_chance(0.1));
        assert!(!mk(&[0.9, 0.6, 0.65, 0.5], 0.25).degrades_to_chance(0.1));
        assert!(!mk(&[0.3, 0.6, 0.65, 0.3], 0.25).degrades_to_chance(0.1));
    }
}
