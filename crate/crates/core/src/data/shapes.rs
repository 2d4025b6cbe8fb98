//! Textured shapes on smooth noise backgrounds, with exact masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mask, Region, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Bar,
    Saltire,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Diamond,
        ShapeKind::Bar,
        ShapeKind::Saltire,
    ];

    pub fn for_class(class: usize) -> Self {
        Self::ALL[class % Self::ALL.len()]
    }

    /// Membership of the offset `(dx, dy)` from the center, for half-size `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => ax <= 0.85 * r && ay <= 0.85 * r,
            ShapeKind::Triangle => dy >= -r && dy <= r && ax <= (dy + r) / 2.0,
            ShapeKind::Cross => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            ShapeKind::Diamond => ax + ay <= r,
            ShapeKind::Bar => ax <= r && ay <= 0.45 * r,
            ShapeKind::Saltire => ax <= r && ay <= r && ((dx - dy).abs() <= 0.45 * r || (dx + dy).abs() <= 0.45 * r),
        }
    }
}

/// Class colors; saturated so mid-gray deletion always changes object pixels.
const COLORS: [[f64; 3]; 8] = [
    [0.9, 0.15, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.1],
    [0.85, 0.1, 0.85],
    [0.1, 0.85, 0.9],
    [0.95, 0.55, 0.05],
    [0.45, 0.1, 0.7],
];

/// Class texture in `[0,1]`; multiplies the class color.
fn texture(class: usize, x: usize, y: usize) -> f64 {
    match class % 4 {
        0 => 1.0,
        1 => {
            if (y / 2) % 2 == 0 {
                1.0
            } else {
                0.55
            }
        }
        2 => {
            if ((x / 2) + (y / 2)) % 2 == 0 {
                1.0
            } else {
                0.55
            }
        }
        _ => {
            if (x / 2) % 2 == 0 {
                1.0
            } else {
                0.55
            }
        }
    }
}

/// Smooth value noise in roughly `[-1, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f64> {
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
            let at = |i: usize, j: usize| lattice[j * n + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

struct Placed {
    class: usize,
    x0: usize,
    y0: usize,
    side: usize,
}

impl Placed {
    fn mask(&self, size: usize) -> Mask {
        let kind = ShapeKind::for_class(self.class);
        let r = self.side as f64 / 2.0;
        let cx = self.x0 as f64 + r;
        let cy = self.y0 as f64 + r;
        let mut bits = vec![false; size * size];
        for y in self.y0..self.y0 + self.side {
            for x in self.x0..self.x0 + self.side {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                bits[y * size + x] = kind.contains(dx, dy, r);
            }
        }
        Mask::new(size, size, bits).expect("mask extent")
    }

    fn separated_from(&self, other: &Placed, gap: usize) -> bool {
        self.x0 + self.side + gap <= other.x0
            || other.x0 + other.side + gap <= self.x0
            || self.y0 + self.side + gap <= other.y0
            || other.y0 + other.side + gap <= self.y0
    }
}

/// Generates `count` samples of `size x size` RGB images.
///
/// Sample `i` has primary class `i % num_classes`. A `difficult_fraction`
/// of samples get a small primary object (under a quarter of the image)
/// plus a fainter, smaller distractor of a different class.
pub fn gen_shapes(
    count: usize,
    size: usize,
    num_classes: usize,
    difficult_fraction: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if size < 32 {
        return Err(Error::invalid(format!("image size must be >= 32, got {size}")));
    }
    if !(2..=8).contains(&num_classes) {
        return Err(Error::invalid(format!(
            "num_classes must be in 2..=8, got {num_classes}"
        )));
    }
    if !(0.0..=1.0).contains(&difficult_fraction) {
        return Err(Error::invalid(format!(
            "difficult_fraction must be in [0,1], got {difficult_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let sz = size as f64;
    for id in 0..count {
        let class = id % num_classes;
        let difficult = rng.gen::<f64>() < difficult_fraction;

        let mut pixels = vec![0.0; 3 * size * size];
        let noise = value_noise(&mut rng, size, (size / 4).max(2));
        let tint: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.05..0.05)).collect();
        for c in 0..3 {
            for i in 0..size * size {
                pixels[c * size * size + i] = 0.5 + tint[c] + 0.12 * noise[i];
            }
        }

        let (lo, hi) = if difficult {
            ((0.28 * sz) as usize, (0.44 * sz) as usize)
        } else {
            ((0.375 * sz) as usize, (0.625 * sz) as usize)
        };
        let side = rng.gen_range(lo..=hi);
        let primary = Placed {
            class,
            x0: rng.gen_range(1..=size - side - 1),
            y0: rng.gen_range(1..=size - side - 1),
            side,
        };
        let mut placed = vec![(primary, 1.0)];
        if difficult {
            let other = (class + rng.gen_range(1..num_classes)) % num_classes;
            let dside = rng.gen_range((0.2 * sz) as usize..=(0.3 * sz) as usize);
            for _ in 0..200 {
                let cand = Placed {
                    class: other,
                    x0: rng.gen_range(1..=size - dside - 1),
                    y0: rng.gen_range(1..=size - dside - 1),
                    side: dside,
                };
                if cand.separated_from(&placed[0].0, 2) {
                    placed.push((cand, 0.6));
                    break;
                }
            }
        }

        let mut regions = Vec::with_capacity(placed.len());
        for (obj, opacity) in &placed {
            let mask = obj.mask(size);
            let color = COLORS[obj.class % COLORS.len()];
            for y in 0..size {
                for x in 0..size {
                    if !mask.get(x, y) {
                        continue;
                    }
                    let t = texture(obj.class, x, y);
                    for c in 0..3 {
                        let p = &mut pixels[c * size * size + y * size + x];
                        *p = (1.0 - opacity) * *p + opacity * color[c] * t;
                    }
                }
            }
            let bbox = mask.bbox().expect("objects are never empty");
            regions.push(Region {
                class: obj.class,
                bbox,
                mask,
            });
        }
        for p in &mut pixels {
            *p = p.clamp(0.0, 1.0);
        }
        let labels = regions.iter().map(|r| r.class).collect();
        let is_difficult = regions.len() > 1;
        out.push(Sample {
            id,
            image: Tensor::new(vec![3, size, size], pixels)?,
            label: class,
            labels,
            regions,
            difficult: is_difficult,
        });
    }
    Ok(out)
}
