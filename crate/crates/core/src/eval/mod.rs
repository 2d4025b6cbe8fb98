//! Benchmark games for saliency maps and the ablation sweeps over them.

mod ablation;
mod bbox;
mod components;
mod curves;
mod localization;
mod pointing;
pub mod report;
mod sanity;
mod threshold;

pub use ablation::{
    ablation_sweep, cached_saliency, count_beating, full_grid, game_items, perturb_items, run_ablation, score_game, AblationCell,
    AblationReport, Game, GameOptions, PerturbationCache,
};
pub use bbox::{iou, BoundingBox};
pub use components::largest_connected_component;
pub use curves::{
    auc, confidence, deletion_curve, insertion_curve, insertion_deletion, Curve, InsDelRecord, InsDelReport,
    DEFAULT_SIGMA_BASE, DEFAULT_STEPS, MID_GRAY,
};
pub use localization::{
    derive_box, score_box, weak_localization, LocalizationGrid, LocalizationRecord, LocalizationReport,
    StrategySummary, IOU_HIT,
};
pub use pointing::{
    point_hits, pointing_game, pointing_location, resize_bilinear, PointingRecord, PointingReport, PointingTargets,
    Resize, DEFAULT_TOLERANCE_PX,
};
pub use sanity::{
    chance_rate, randomize_last, sanity_check, trend_slope, weight_layer_positions, SanityPoint, SanityReport,
};
pub use threshold::{saliency_order, threshold_mask, ThresholdKind, ThresholdStrategy};

use rayon::prelude::*;

use crate::data::Sample;
use crate::error::Result;
use crate::tensor::Tensor;

/// Saliency of `class` for a sample, as an `[H,W]` map.
pub type SaliencyFn<'a> = dyn Fn(&Sample, usize) -> Result<Tensor> + Sync + 'a;

/// Order-preserving parallel map on the current rayon pool.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    items.par_iter().map(f).collect()
}
