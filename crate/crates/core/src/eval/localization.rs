use serde::Serialize;
use serde_json::{json, Value};

use super::report::Table;
use super::{iou, largest_connected_component, par_map, threshold_mask, BoundingBox, SaliencyFn, ThresholdKind, ThresholdStrategy};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// IoU needed for a hit.
pub const IOU_HIT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationGrid {
    pub kinds: Vec<ThresholdKind>,
    pub step: f64,
}

impl Default for LocalizationGrid {
    fn default() -> Self {
        Self {
            kinds: ThresholdKind::ALL.to_vec(),
            step: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationRecord {
    pub image_id: usize,
    pub kind: ThresholdKind,
    pub alpha: f64,
    pub iou: f64,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategySummary {
    pub kind: ThresholdKind,
    pub alphas: Vec<f64>,
    /// Miss rate at each alpha.
    pub errors: Vec<f64>,
    pub best_alpha: f64,
    pub best_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationReport {
    pub images: usize,
    pub records: Vec<LocalizationRecord>,
    pub strategies: Vec<StrategySummary>,
}

impl LocalizationReport {
    /// Lowest error over every strategy and alpha.
    pub fn best_error(&self) -> f64 {
        self.strategies
            .iter()
            .map(|s| s.best_error)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn strategy(&self, kind: ThresholdKind) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.kind == kind)
    }

    /// Mean over strategies of each strategy's best error.
    pub fn mean_best_error(&self) -> f64 {
        self.strategies.iter().map(|s| s.best_error).sum::<f64>() / self.strategies.len() as f64
    }

    pub fn table(&self, config_hash: &str) -> Table {
        let mut t = Table::new(&["image_id", "config_hash", "strategy", "alpha", "iou", "hit"]);
        for r in &self.records {
            t.push(vec![
                r.image_id.to_string(),
                config_hash.to_string(),
                r.kind.to_string(),
                r.alpha.to_string(),
                r.iou.to_string(),
                u8::from(r.hit).to_string(),
            ]);
        }
        t
    }

    pub fn aggregates(&self) -> Value {
        json!({
            "images": self.images,
            "strategies": self.strategies,
            "best_error": self.best_error(),
            "mean_best_error": self.mean_best_error(),
            "mean_formula": "mean over strategies of the per-strategy minimum error over alpha",
        })
    }
}

/// Box of the largest connected component of the thresholded map.
pub fn derive_box(map: &Tensor, strategy: &ThresholdStrategy) -> Result<Option<BoundingBox>> {
    let mask = threshold_mask(map, strategy)?;
    Ok(largest_connected_component(&mask).bbox())
}

/// Best IoU of `derived` against any ground-truth box; `None` scores 0.
pub fn score_box(derived: Option<&BoundingBox>, truth: &[BoundingBox]) -> f64 {
    match derived {
        None => 0.0,
        Some(b) => truth.iter().map(|t| iou(b, t)).fold(0.0, f64::max),
    }
}

/// Weak localization of each sample's primary class over a threshold grid.
///
/// `saliency` must return maps already scaled to `[0,1]`.
pub fn weak_localization(
    samples: &[Sample],
    saliency: &SaliencyFn<'_>,
    grid: &LocalizationGrid,
) -> Result<LocalizationReport> {
    if samples.is_empty() {
        return Err(Error::invalid("localization needs at least one sample"));
    }
    if grid.kinds.is_empty() {
        return Err(Error::invalid("localization grid has no strategies"));
    }
    let alphas: Vec<(ThresholdKind, Vec<f64>)> = grid
        .kinds
        .iter()
        .map(|&k| Ok((k, k.alpha_grid(grid.step)?)))
        .collect::<Result<_>>()?;
    let per_image = par_map(samples, |s| {
        let truth: Vec<BoundingBox> = s
            .regions
            .iter()
            .filter(|r| r.class == s.label)
            .map(|r| r.bbox)
            .collect();
        let map = saliency(s, s.label)?;
        if map.shape() != [s.height(), s.width()] {
            return Err(Error::shape(format!(
                "saliency for sample {} has shape {:?}",
                s.id,
                map.shape()
            )));
        }
        let mut out = Vec::new();
        for (kind, grid) in &alphas {
            for &alpha in grid {
                let b = derive_box(&map, &ThresholdStrategy { kind: *kind, alpha })?;
                let v = score_box(b.as_ref(), &truth);
                out.push(LocalizationRecord {
                    image_id: s.id,
                    kind: *kind,
                    alpha,
                    iou: v,
                    hit: v >= IOU_HIT,
                });
            }
        }
        Ok(out)
    })?;
    let mut records: Vec<LocalizationRecord> = per_image.into_iter().flatten().collect();
    records.sort_by_key(|r| r.image_id);
    let n = samples.len() as f64;
    let strategies = alphas
        .into_iter()
        .map(|(kind, grid)| {
            let errors: Vec<f64> = grid
                .iter()
                .map(|&a| {
                    let misses = records
                        .iter()
                        .filter(|r| r.kind == kind && r.alpha == a && !r.hit)
                        .count();
                    misses as f64 / n
                })
                .collect();
            // first alpha wins ties
            let (bi, best) = errors
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, &e)| if e < acc.1 { (i, e) } else { acc });
            StrategySummary {
                kind,
                best_alpha: grid[bi],
                best_error: best,
                alphas: grid,
                errors,
            }
        })
        .collect();
    Ok(LocalizationReport {
        images: samples.len(),
        records,
        strategies,
    })
}
