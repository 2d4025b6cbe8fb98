use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::report::Table;
use super::{par_map, SaliencyFn};
use crate::data::{Mask, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE_PX: usize = 15;

/// Which classes of each sample to point at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointingTargets {
    Primary,
    AllLabels,
    /// One fixed class; samples without it are skipped.
    Class(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resize {
    None,
    /// Explain a 1.5x bilinear upscale, then shrink the map back.
    Bilinear1_5x,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointingRecord {
    pub image_id: usize,
    pub class: usize,
    pub x: usize,
    pub y: usize,
    pub hit: bool,
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointingReport {
    pub records: Vec<PointingRecord>,
    /// `(image_id, class)` pairs whose class is absent from the image.
    pub skipped: Vec<(usize, usize)>,
}

fn rate<'a>(it: impl Iterator<Item = &'a PointingRecord>) -> Option<f64> {
    let (mut n, mut hits) = (0usize, 0usize);
    for r in it {
        n += 1;
        hits += usize::from(r.hit);
    }
    (n > 0).then(|| hits as f64 / n as f64)
}

impl PointingReport {
    pub fn accuracy(&self) -> f64 {
        rate(self.records.iter()).unwrap_or(0.0)
    }

    /// Accuracy on the difficult subset, if it is non-empty.
    pub fn difficult_accuracy(&self) -> Option<f64> {
        rate(self.records.iter().filter(|r| r.difficult))
    }

    pub fn table(&self, config_hash: &str) -> Table {
        let mut t = Table::new(&["image_id", "config_hash", "class", "x", "y", "hit", "difficult"]);
        for r in &self.records {
            t.push(vec![
                r.image_id.to_string(),
                config_hash.to_string(),
                r.class.to_string(),
                r.x.to_string(),
                r.y.to_string(),
                u8::from(r.hit).to_string(),
                u8::from(r.difficult).to_string(),
            ]);
        }
        t
    }

    pub fn aggregates(&self) -> Value {
        json!({
            "items": self.records.len(),
            "accuracy": self.accuracy(),
            "difficult_items": self.records.iter().filter(|r| r.difficult).count(),
            "difficult_accuracy": self.difficult_accuracy(),
            "skipped": self.skipped,
        })
    }
}

/// True when some mask pixel lies within `tolerance` (Euclidean) of `(x, y)`.
pub fn point_hits(mask: &Mask, x: usize, y: usize, tolerance: usize) -> bool {
    let t = tolerance as i64;
    let (x, y) = (x as i64, y as i64);
    for yy in (y - t).max(0)..=(y + t).min(mask.height as i64 - 1) {
        for xx in (x - t).max(0)..=(x + t).min(mask.width as i64 - 1) {
            let (dx, dy) = (xx - x, yy - y);
            if dx * dx + dy * dy <= t * t && mask.get(xx as usize, yy as usize) {
                return true;
            }
        }
    }
    false
}

/// Bilinear resize of a `[C,H,W]` or `[H,W]` tensor with pixel-center alignment.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match t.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("cannot resize tensor of shape {s:?}"))),
    };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape("resize to or from an empty extent"));
    }
    let coord = |dst: usize, src_len: usize, dst_len: usize| {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let d = t.data();
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = coord(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = coord(ox, w, out_w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let shape = if t.ndim() == 2 { vec![out_h, out_w] } else { vec![c, out_h, out_w] };
    Tensor::new(shape, out)
}

/// Most salient pixel, first in row-major order on ties; returns `(x, y)`.
pub fn pointing_location(map: &Tensor) -> Result<(usize, usize)> {
    map.expect_rank(2, "saliency map")?;
    let i = map.argmax();
    let w = map.shape()[1];
    Ok((i % w, i / w))
}

/// Points at the saliency maximum of each target class.
///
/// An item is difficult when its class region covers under a quarter of
/// the image and another class is present.
pub fn pointing_game(
    samples: &[Sample],
    targets: PointingTargets,
    saliency: &SaliencyFn<'_>,
    tolerance_px: usize,
    resize: Resize,
) -> Result<PointingReport> {
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for s in samples {
        let classes = match targets {
            PointingTargets::Primary => vec![s.label],
            PointingTargets::AllLabels => s.labels.clone(),
            PointingTargets::Class(c) => vec![c],
        };
        for class in classes {
            if s.region(class).is_some() {
                items.push((s, class));
            } else {
                log::warn!("sample {} has no class {class}; skipped", s.id);
                skipped.push((s.id, class));
            }
        }
    }
    if items.is_empty() {
        return Err(Error::invalid("pointing game has no items to score"));
    }
    let mut records = par_map(&items, |&(s, class)| {
        let (h, w) = (s.height(), s.width());
        let map = match resize {
            Resize::None => saliency(s, class)?,
            Resize::Bilinear1_5x => {
                let (bh, bw) = ((h * 3).div_ceil(2), (w * 3).div_ceil(2));
                let mut big = s.clone();
                big.image = resize_bilinear(&s.image, bh, bw)?;
                resize_bilinear(&saliency(&big, class)?, h, w)?
            }
        };
        if map.shape() != [h, w] {
            return Err(Error::shape(format!("saliency for sample {} has shape {:?}", s.id, map.shape())));
        }
        let (x, y) = pointing_location(&map)?;
        let hit = s.regions.iter().any(|r| r.class == class && point_hits(&r.mask, x, y, tolerance_px));
        let area: usize = s.regions.iter().filter(|r| r.class == class).map(|r| r.mask.area()).sum();
        let distractor = s.regions.iter().any(|r| r.class != class);
        Ok(PointingRecord {
            image_id: s.id,
            class,
            x,
            y,
            hit,
            difficult: (area as f64) < 0.25 * (h * w) as f64 && distractor,
        })
    })?;
    records.sort_by_key(|r| (r.image_id, r.class));
    Ok(PointingReport { records, skipped })
}
