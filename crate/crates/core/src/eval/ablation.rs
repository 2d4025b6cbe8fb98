use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::report::Table;
use super::{
    insertion_deletion, par_map, pointing_game, weak_localization, LocalizationGrid, PointingTargets, Resize,
    SaliencyFn,
};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{LayerSet, Network};
use crate::perturb::{find_perturbation, MarginSpec, PerturbConfig};
use crate::saliency;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Game {
    /// Best weak-localization error over strategies and alphas.
    Localization,
    /// Mean deletion AUC.
    Deletion,
    /// Mean insertion AUC.
    Insertion,
    /// Pointing accuracy.
    Pointing,
}

impl Game {
    pub fn higher_is_better(self) -> bool {
        matches!(self, Game::Insertion | Game::Pointing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameOptions {
    pub game: Game,
    pub guided: bool,
    pub alpha_step: f64,
    pub steps: usize,
    pub sigma_base: f64,
    pub tolerance_px: usize,
    pub targets: PointingTargets,
}

impl GameOptions {
    pub fn new(game: Game) -> Self {
        Self {
            game,
            guided: false,
            alpha_step: 0.05,
            steps: super::DEFAULT_STEPS,
            sigma_base: super::DEFAULT_SIGMA_BASE,
            tolerance_px: super::DEFAULT_TOLERANCE_PX,
            targets: PointingTargets::Primary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    /// Regularized ReLUs are `i..j`; `i == j` is the no-perceptual baseline.
    pub i: usize,
    pub j: usize,
    /// Game metric for each sigma of the sweep.
    pub metrics: Vec<f64>,
    pub best: f64,
    pub best_sigma: f64,
    /// Sigmas whose metric beats the bar.
    pub beats_bar: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub sigmas: Vec<f64>,
    pub bar: f64,
    pub higher_is_better: bool,
    pub cells: Vec<AblationCell>,
}

/// Number of metrics strictly better than `bar`.
pub fn count_beating(metrics: &[f64], bar: f64, higher_is_better: bool) -> usize {
    metrics
        .iter()
        .filter(|&&m| if higher_is_better { m > bar } else { m < bar })
        .count()
}

/// Every cell `(i, j)` with `0 <= i <= j <= num_relus`.
pub fn full_grid(num_relus: usize) -> Vec<(usize, usize)> {
    (0..=num_relus)
        .flat_map(|i| (i..=num_relus).map(move |j| (i, j)))
        .collect()
}

/// Runs `evaluate(i, j, sigmas)` for each cell and summarizes over sigma.
/// Ties for the best sigma go to the earliest.
pub fn ablation_sweep(
    cells: &[(usize, usize)],
    sigmas: &[f64],
    bar: f64,
    higher_is_better: bool,
    mut evaluate: impl FnMut(usize, usize, &[f64]) -> Result<Vec<f64>>,
) -> Result<AblationReport> {
    if cells.is_empty() || sigmas.is_empty() {
        return Err(Error::invalid("ablation grids must be non-empty"));
    }
    if let Some(&(i, j)) = cells.iter().find(|(i, j)| i > j) {
        return Err(Error::invalid(format!("ablation cell ({i},{j}) has i > j")));
    }
    let mut out = Vec::with_capacity(cells.len());
    for &(i, j) in cells {
        let metrics = evaluate(i, j, sigmas)?;
        if metrics.len() != sigmas.len() {
            return Err(Error::invalid(format!(
                "cell ({i},{j}) returned {} metrics for {} sigmas",
                metrics.len(),
                sigmas.len()
            )));
        }
        let mut bi = 0;
        for (k, &m) in metrics.iter().enumerate() {
            let better = if higher_is_better { m > metrics[bi] } else { m < metrics[bi] };
            if better {
                bi = k;
            }
        }
        out.push(AblationCell {
            i,
            j,
            best: metrics[bi],
            best_sigma: sigmas[bi],
            beats_bar: count_beating(&metrics, bar, higher_is_better),
            metrics,
        });
    }
    Ok(AblationReport {
        sigmas: sigmas.to_vec(),
        bar,
        higher_is_better,
        cells: out,
    })
}

impl AblationReport {
    pub fn cell(&self, i: usize, j: usize) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.i == i && c.j == j)
    }

    /// Square matrix of best-over-sigma metrics with ReLU ordinals as row
    /// and column headers; cells outside the sweep are blank.
    pub fn matrix(&self) -> Table {
        let n = self.cells.iter().map(|c| c.j).max().unwrap_or(0);
        let mut header = vec!["i\\j".to_string()];
        header.extend((0..=n).map(|j| j.to_string()));
        let mut t = Table {
            header,
            rows: Vec::new(),
        };
        for i in 0..=n {
            let mut row = vec![i.to_string()];
            row.extend((0..=n).map(|j| self.cell(i, j).map(|c| c.best.to_string()).unwrap_or_default()));
            t.push(row);
        }
        t
    }

    /// Robustness counts laid out like [`matrix`](Self::matrix).
    pub fn count_matrix(&self) -> Table {
        let mut t = self.matrix();
        for row in &mut t.rows {
            let i: usize = row[0].parse().expect("ordinal");
            for (j, cell) in row.iter_mut().enumerate().skip(1) {
                *cell = self.cell(i, j - 1).map(|c| c.beats_bar.to_string()).unwrap_or_default();
            }
        }
        t
    }

    /// One row per `(i, j, sigma)`.
    pub fn long_table(&self, config_hash: &str) -> Table {
        let mut t = Table::new(&["i", "j", "config_hash", "sigma", "metric"]);
        for c in &self.cells {
            for (s, m) in self.sigmas.iter().zip(&c.metrics) {
                t.push(vec![
                    c.i.to_string(),
                    c.j.to_string(),
                    config_hash.to_string(),
                    s.to_string(),
                    m.to_string(),
                ]);
            }
        }
        t
    }

    pub fn aggregates(&self) -> Value {
        json!({
            "bar": self.bar,
            "higher_is_better": self.higher_is_better,
            "sigmas": self.sigmas,
            "cells": self.cells,
        })
    }
}

/// Perturbations of `(sample, class)` items keyed by `(sample id, class)`.
pub type PerturbationCache = HashMap<(usize, usize), Tensor>;

/// Items a game scores: the primary class, or every target class for pointing.
pub fn game_items<'a>(samples: &'a [Sample], opts: &GameOptions) -> Vec<(&'a Sample, usize)> {
    let mut items = Vec::new();
    for s in samples {
        let classes = match (opts.game, opts.targets) {
            (Game::Pointing, PointingTargets::AllLabels) => s.labels.clone(),
            (Game::Pointing, PointingTargets::Class(c)) => vec![c],
            _ => vec![s.label],
        };
        for c in classes {
            if s.region(c).is_some() {
                items.push((s, c));
            }
        }
    }
    items
}

/// Perturbs every item with `cfg`.
pub fn perturb_items(net: &Network, items: &[(&Sample, usize)], cfg: &PerturbConfig) -> Result<PerturbationCache> {
    let results = par_map(items, |&(s, class)| {
        let r = find_perturbation(&s.image, net, &MarginSpec::for_network(net, class), cfg)?;
        Ok(((s.id, class), r.x_prime))
    })?;
    Ok(results.into_iter().collect())
}

/// Saliency from cached perturbations. Localization maps are scaled to
/// `[0,1]` before guidance and again after the blur, since the thresholds
/// expect that range.
pub fn cached_saliency<'a>(
    net: &'a Network,
    cache: &'a PerturbationCache,
    guided: bool,
    normalize: bool,
    sigma: f64,
) -> impl Fn(&Sample, usize) -> Result<Tensor> + Sync + 'a {
    move |s: &Sample, class: usize| {
        let xp = cache
            .get(&(s.id, class))
            .ok_or_else(|| Error::invalid(format!("no perturbation for sample {} class {class}", s.id)))?;
        let m = saliency::build(&s.image, xp, net, class, sigma, guided, normalize)?.values;
        Ok(if normalize { saliency::normalize01(&m) } else { m })
    }
}

/// Scores one game for cached perturbations at one sigma.
pub fn score_game(
    net: &Network,
    samples: &[Sample],
    cache: &PerturbationCache,
    opts: &GameOptions,
    sigma: f64,
) -> Result<f64> {
    let sal = cached_saliency(net, cache, opts.guided, opts.game == Game::Localization, sigma);
    let sal: &SaliencyFn<'_> = &sal;
    Ok(match opts.game {
        Game::Localization => {
            let grid = LocalizationGrid {
                step: opts.alpha_step,
                ..LocalizationGrid::default()
            };
            weak_localization(samples, sal, &grid)?.best_error()
        }
        Game::Deletion => insertion_deletion(samples, net, sal, opts.steps, opts.sigma_base)?.mean_deletion(),
        Game::Insertion => insertion_deletion(samples, net, sal, opts.steps, opts.sigma_base)?.mean_insertion(),
        Game::Pointing => pointing_game(samples, opts.targets, sal, opts.tolerance_px, Resize::None)?.accuracy(),
    })
}

/// Layer-range by sigma sweep of one game. Each cell perturbs every item
/// once with `base` restricted to ReLUs `i..j`; all `i == j` cells share
/// one no-perceptual run.
pub fn run_ablation(
    net: &Network,
    samples: &[Sample],
    base: &PerturbConfig,
    opts: &GameOptions,
    cells: &[(usize, usize)],
    sigmas: &[f64],
    bar: f64,
) -> Result<AblationReport> {
    let n = net.spec().num_relus();
    if let Some(&(i, j)) = cells.iter().find(|&&(_, j)| j > n) {
        return Err(Error::invalid(format!("ablation cell ({i},{j}) exceeds the network's {n} ReLUs")));
    }
    let items = game_items(samples, opts);
    let mut baseline: Option<PerturbationCache> = None;
    ablation_sweep(cells, sigmas, bar, opts.game.higher_is_better(), |i, j, sigmas| {
        let cfg = PerturbConfig {
            layer_set: LayerSet::range(i, j),
            ..base.clone()
        };
        let fresh;
        let cache = if i == j {
            if baseline.is_none() {
                baseline = Some(perturb_items(net, &items, &cfg)?);
            }
            baseline.as_ref().expect("just filled")
        } else {
            fresh = perturb_items(net, &items, &cfg)?;
            &fresh
        };
        sigmas
            .iter()
            .map(|&s| score_game(net, samples, cache, opts, s))
            .collect()
    })
}
