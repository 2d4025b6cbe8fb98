use serde::Serialize;
use serde_json::{json, Value};

use super::report::Table;
use super::{par_map, saliency_order, SaliencyFn};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{predict, Network};
use crate::saliency::blur_channels;
use crate::tensor::ops::softmax;
use crate::tensor::Tensor;

/// Value written into deleted pixels.
pub const MID_GRAY: f64 = 0.5;
pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_SIGMA_BASE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curve {
    pub fractions: Vec<f64>,
    pub scores: Vec<f64>,
}

impl Curve {
    pub fn new(fractions: Vec<f64>, scores: Vec<f64>) -> Result<Self> {
        if fractions.len() != scores.len() || fractions.len() < 2 {
            return Err(Error::invalid("curve needs at least two points of equal length"));
        }
        if fractions[0] != 0.0 || *fractions.last().unwrap() != 1.0 {
            return Err(Error::invalid("curve fractions must run from 0 to 1"));
        }
        if fractions.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("curve fractions must ascend"));
        }
        Ok(Self { fractions, scores })
    }
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &Curve) -> f64 {
    curve
        .fractions
        .windows(2)
        .zip(curve.scores.windows(2))
        .map(|(f, s)| (f[1] - f[0]) * (s[0] + s[1]) / 2.0)
        .sum()
}

/// Softmax probability of `class`.
pub fn confidence(net: &Network, x: &Tensor, class: usize) -> Result<f64> {
    let logits = predict(net, x)?;
    if class >= logits.len() {
        return Err(Error::invalid(format!("class {class} out of range for {} classes", logits.len())));
    }
    Ok(softmax(logits.data())[class])
}

/// Moves pixels from `start` to `end` in saliency order, scoring after each
/// `1/steps` of the image.
fn sweep(start: &Tensor, end: &Tensor, map: &Tensor, net: &Network, class: usize, steps: usize) -> Result<Curve> {
    start.expect_rank(3, "image")?;
    map.expect_rank(2, "saliency map")?;
    let (c, h, w) = (start.shape()[0], start.shape()[1], start.shape()[2]);
    if map.shape() != [h, w] {
        return Err(Error::shape(format!("map {:?} does not match image {h}x{w}", map.shape())));
    }
    if steps < 2 {
        return Err(Error::invalid(format!("curves need steps >= 2, got {steps}")));
    }
    let n = h * w;
    let order = saliency_order(map.data());
    let mut current = start.data().to_vec();
    let mut fractions = Vec::with_capacity(steps + 1);
    let mut scores = Vec::with_capacity(steps + 1);
    let mut moved = 0;
    for k in 0..=steps {
        let target = k * n / steps;
        for &p in &order[moved..target] {
            for ch in 0..c {
                current[ch * n + p] = end.data()[ch * n + p];
            }
        }
        moved = target;
        let img = Tensor::new(vec![c, h, w], current.clone())?;
        fractions.push(k as f64 / steps as f64);
        scores.push(confidence(net, &img, class)?);
    }
    Curve::new(fractions, scores)
}

/// Confidence as the most salient pixels turn mid-gray.
pub fn deletion_curve(x: &Tensor, map: &Tensor, net: &Network, class: usize, steps: usize) -> Result<Curve> {
    let gray = Tensor::full(x.shape(), MID_GRAY);
    sweep(x, &gray, map, net, class, steps)
}

/// Confidence as the most salient pixels are restored into a blurred copy.
pub fn insertion_curve(
    x: &Tensor,
    map: &Tensor,
    net: &Network,
    class: usize,
    steps: usize,
    sigma_base: f64,
) -> Result<Curve> {
    x.expect_rank(3, "image")?;
    let blurred = blur_channels(x, sigma_base)?;
    sweep(&blurred, x, map, net, class, steps)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InsDelRecord {
    pub image_id: usize,
    pub class: usize,
    pub deletion_auc: f64,
    pub insertion_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InsDelReport {
    pub records: Vec<InsDelRecord>,
}

impl InsDelReport {
    pub fn mean_deletion(&self) -> f64 {
        self.records.iter().map(|r| r.deletion_auc).sum::<f64>() / self.records.len() as f64
    }

    pub fn mean_insertion(&self) -> f64 {
        self.records.iter().map(|r| r.insertion_auc).sum::<f64>() / self.records.len() as f64
    }

    pub fn table(&self, config_hash: &str) -> Table {
        let mut t = Table::new(&["image_id", "config_hash", "class", "deletion_auc", "insertion_auc"]);
        for r in &self.records {
            t.push(vec![
                r.image_id.to_string(),
                config_hash.to_string(),
                r.class.to_string(),
                r.deletion_auc.to_string(),
                r.insertion_auc.to_string(),
            ]);
        }
        t
    }

    pub fn aggregates(&self) -> Value {
        json!({
            "images": self.records.len(),
            "mean_deletion_auc": self.mean_deletion(),
            "mean_insertion_auc": self.mean_insertion(),
        })
    }
}

/// Deletion and insertion AUCs for each sample's primary class.
pub fn insertion_deletion(
    samples: &[Sample],
    net: &Network,
    saliency: &SaliencyFn<'_>,
    steps: usize,
    sigma_base: f64,
) -> Result<InsDelReport> {
    if samples.is_empty() {
        return Err(Error::invalid("insertion/deletion needs at least one sample"));
    }
    let mut records = par_map(samples, |s| {
        let map = saliency(s, s.label)?;
        Ok(InsDelRecord {
            image_id: s.id,
            class: s.label,
            deletion_auc: auc(&deletion_curve(&s.image, &map, net, s.label, steps)?),
            insertion_auc: auc(&insertion_curve(&s.image, &map, net, s.label, steps, sigma_base)?),
        })
    })?;
    records.sort_by_key(|r| r.image_id);
    Ok(InsDelReport { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        let flat = Curve::new(vec![0.0, 0.5, 1.0], vec![1.0; 3]).unwrap();
        assert_eq!(auc(&flat), 1.0);
        let line = Curve::new(vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        assert_eq!(auc(&line), 0.5);
        assert!(Curve::new(vec![0.0, 0.9], vec![1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn auc_ignores_collinear_midpoints(s in proptest::collection::vec(0.0f64..1.0, 2..12), t in 0.01f64..0.99, seg in 0usize..10) {
            let n = s.len();
            let f: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
            let c = Curve::new(f.clone(), s.clone()).unwrap();
            let k = seg % (n - 1);
            let fm = f[k] + t * (f[k + 1] - f[k]);
            let sm = s[k] + t * (s[k + 1] - s[k]);
            let mut f2 = f.clone();
            let mut s2 = s.clone();
            f2.insert(k + 1, fm);
            s2.insert(k + 1, sm);
            let c2 = Curve::new(f2, s2).unwrap();
            prop_assert!((auc(&c) - auc(&c2)).abs() < 1e-12);
        }
    }
}
