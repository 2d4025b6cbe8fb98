//! Synthetic labeled images and their on-disk formats.

mod dataset;
mod ppm;
mod shapes;

pub use dataset::{load_dataset, save_dataset, Dataset};
pub use ppm::{read_ppm, write_ppm};
pub use shapes::{gen_shapes, ShapeKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::BoundingBox;
use crate::tensor::Tensor;

/// Binary `height x width` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::shape(format!(
                "mask {width}x{height} needs {} cells, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn bbox(&self) -> Option<BoundingBox> {
        BoundingBox::of_mask(&self.bits, self.width)
    }

    /// Run-length encoding as `[start, len]` pairs of set cells.
    pub fn to_runs(&self) -> Vec<[usize; 2]> {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < self.bits.len() {
            if self.bits[i] {
                let start = i;
                while i < self.bits.len() && self.bits[i] {
                    i += 1;
                }
                runs.push([start, i - start]);
            } else {
                i += 1;
            }
        }
        runs
    }

    pub fn from_runs(width: usize, height: usize, runs: &[[usize; 2]]) -> Result<Self> {
        let mut bits = vec![false; width * height];
        for &[start, len] in runs {
            let end = start
                .checked_add(len)
                .filter(|&e| e <= bits.len())
                .ok_or_else(|| Error::invalid(format!("mask run {start}+{len} out of bounds")))?;
            bits[start..end].fill(true);
        }
        Self::new(width, height, bits)
    }
}

/// Ground-truth region of one object.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub class: usize,
    pub bbox: BoundingBox,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `[C,H,W]` with values in `[0,1]`.
    pub image: Tensor,
    /// Primary (single-label) class.
    pub label: usize,
    /// Every class present, primary first.
    pub labels: Vec<usize>,
    pub regions: Vec<Region>,
    /// Small primary object plus a distractor of another class.
    pub difficult: bool,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// First region of `class`, if present.
    pub fn region(&self, class: usize) -> Option<&Region> {
        self.regions.iter().find(|r| r.class == class)
    }

    pub fn primary_region(&self) -> Option<&Region> {
        self.region(self.label)
    }

    /// Checks labels, regions and masks against the image extent.
    pub fn validate(&self) -> Result<()> {
        self.image.expect_rank(3, "sample image")?;
        let (h, w) = (self.height(), self.width());
        if self.labels.first() != Some(&self.label) {
            return Err(Error::invalid(format!(
                "sample {}: primary label must come first in labels",
                self.id
            )));
        }
        for &l in &self.labels {
            if self.region(l).is_none() {
                return Err(Error::invalid(format!(
                    "sample {}: label {l} has no region",
                    self.id
                )));
            }
        }
        for r in &self.regions {
            if !r.bbox.within(w, h) {
                return Err(Error::invalid(format!(
                    "sample {}: box {:?} outside {w}x{h} image",
                    self.id, r.bbox
                )));
            }
            if r.mask.width != w || r.mask.height != h {
                return Err(Error::invalid(format!(
                    "sample {}: mask {}x{} does not match image {w}x{h}",
                    self.id, r.mask.width, r.mask.height
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct RegionRecord {
    pub class: usize,
    pub bbox: BoundingBox,
    pub mask_runs: Vec<[usize; 2]>,
}
