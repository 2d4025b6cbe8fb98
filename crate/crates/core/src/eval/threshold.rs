use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdKind {
    /// Keep `v >= alpha`.
    Value,
    /// Keep the `ceil(alpha * H * W)` most salient pixels.
    Percent,
    /// Keep `v >= alpha * mean(v)`.
    MeanScaled,
}

impl ThresholdKind {
    pub const ALL: [ThresholdKind; 3] = [ThresholdKind::Value, ThresholdKind::Percent, ThresholdKind::MeanScaled];

    pub fn max_alpha(self) -> f64 {
        match self {
            ThresholdKind::Value | ThresholdKind::Percent => 1.0,
            ThresholdKind::MeanScaled => 10.5,
        }
    }

    /// `step, 2*step, ...` up to the largest legal alpha.
    pub fn alpha_grid(self, step: f64) -> Result<Vec<f64>> {
        if !(step > 0.0) || step > self.max_alpha() {
            return Err(Error::invalid(format!("alpha step must be in (0, {}], got {step}", self.max_alpha())));
        }
        let n = (self.max_alpha() / step + 1e-9).floor() as usize;
        // k / (1/step) keeps grids like 0.05 free of accumulated float noise
        let inv = (1.0 / step).round();
        if (1.0 / step - inv).abs() < 1e-9 {
            Ok((1..=n).map(|k| k as f64 / inv).collect())
        } else {
            Ok((1..=n).map(|k| k as f64 * step).collect())
        }
    }
}

impl fmt::Display for ThresholdKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdKind::Value => "value",
            ThresholdKind::Percent => "percent",
            ThresholdKind::MeanScaled => "mean_scaled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStrategy {
    pub kind: ThresholdKind,
    pub alpha: f64,
}

impl ThresholdStrategy {
    pub fn new(kind: ThresholdKind, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= kind.max_alpha() + 1e-12) {
            return Err(Error::invalid(format!(
                "{kind} threshold needs 0 < alpha <= {}, got {alpha}",
                kind.max_alpha()
            )));
        }
        Ok(Self { kind, alpha })
    }
}

/// Pixel indices ordered by decreasing value, row-major among ties.
pub fn saliency_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

pub fn threshold_mask(map: &Tensor, strategy: &ThresholdStrategy) -> Result<Mask> {
    map.expect_rank(2, "saliency map")?;
    let strategy = ThresholdStrategy::new(strategy.kind, strategy.alpha)?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let v = map.data();
    let bits = match strategy.kind {
        ThresholdKind::Value => v.iter().map(|&p| p >= strategy.alpha).collect(),
        ThresholdKind::MeanScaled => {
            let cut = strategy.alpha * map.mean();
            v.iter().map(|&p| p >= cut).collect()
        }
        ThresholdKind::Percent => {
            // tolerate alpha * n landing a hair above an integer
            let n = ((strategy.alpha * v.len() as f64) - 1e-9).ceil().max(0.0) as usize;
            let mut bits = vec![false; v.len()];
            for &i in saliency_order(v).iter().take(n.min(v.len())) {
                bits[i] = true;
            }
            bits
        }
    };
    Mask::new(w, h, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::normalize01;
    use proptest::prelude::*;

    #[test]
    fn grids() {
        let g = ThresholdKind::Value.alpha_grid(0.05).unwrap();
        assert_eq!(g.len(), 20);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert_eq!(ThresholdKind::MeanScaled.alpha_grid(0.05).unwrap().len(), 210);
        assert!(ThresholdKind::Value.alpha_grid(0.0).is_err());
    }

    #[test]
    fn legal_ranges() {
        assert!(ThresholdStrategy::new(ThresholdKind::Value, 0.0).is_err());
        assert!(ThresholdStrategy::new(ThresholdKind::Percent, 1.2).is_err());
        assert!(ThresholdStrategy::new(ThresholdKind::MeanScaled, 10.5).is_ok());
        assert!(ThresholdStrategy::new(ThresholdKind::MeanScaled, 10.6).is_err());
    }

    #[test]
    fn examples() {
        let m = normalize01(&Tensor::new(vec![2, 3], vec![0.1, 0.9, 0.3, 0.2, 0.05, 0.4]).unwrap());
        let s = ThresholdStrategy::new(ThresholdKind::Value, 0.05).unwrap();
        assert!(threshold_mask(&m, &s).unwrap().bits[1]);
        let all = ThresholdStrategy::new(ThresholdKind::Percent, 1.0).unwrap();
        assert_eq!(threshold_mask(&m, &all).unwrap().area(), 6);
        let c = Tensor::full(&[3, 3], 0.6);
        let one = ThresholdStrategy::new(ThresholdKind::MeanScaled, 1.0).unwrap();
        let over = ThresholdStrategy::new(ThresholdKind::MeanScaled, 1.05).unwrap();
        assert_eq!(threshold_mask(&c, &one).unwrap().area(), 9);
        assert_eq!(threshold_mask(&c, &over).unwrap().area(), 0);
    }

    #[test]
    fn percent_ties_go_row_major() {
        let m = Tensor::full(&[2, 2], 1.0);
        let s = ThresholdStrategy::new(ThresholdKind::Percent, 0.5).unwrap();
        assert_eq!(threshold_mask(&m, &s).unwrap().bits, vec![true, true, false, false]);
    }

    proptest! {
        #[test]
        fn percent_count_without_ties(seed in 0u64..1000, alpha_k in 1usize..=20) {
            let n = 7 * 9;
            // a permutation has no ties
            let v: Vec<f64> = (0..n).map(|i| ((i as u64 * 31 + seed * 17) % n as u64) as f64).collect();
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            prop_assume!(sorted.len() == n);
            let alpha = alpha_k as f64 * 0.05;
            let m = threshold_mask(&Tensor::new(vec![7, 9], v).unwrap(), &ThresholdStrategy::new(ThresholdKind::Percent, alpha).unwrap()).unwrap();
            prop_assert_eq!(m.area(), (alpha * n as f64 - 1e-9).ceil() as usize);
        }
    }
}
