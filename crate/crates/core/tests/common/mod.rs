//! Brute-force oracles and helpers shared by the integration tests.
#![allow(dead_code)]

use pball::data::Mask;
use pball::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn with_coord(t: &Tensor, k: usize, delta: f64) -> Tensor {
    let mut d = t.data().to_vec();
    d[k] += delta;
    Tensor::new(t.shape().to_vec(), d).unwrap()
}

/// Largest 4-connected component by repeated flood fill; the first
/// component found wins ties.
pub fn flood_fill_largest(mask: &Mask) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![usize::MAX; w * h];
    let mut best: Option<(usize, usize)> = None;
    let mut next = 0;
    for start in 0..w * h {
        if !mask.bits[start] || label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = next;
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut nb = Vec::new();
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < w {
                nb.push(i + 1);
            }
            if y > 0 {
                nb.push(i - w);
            }
            if y + 1 < h {
                nb.push(i + w);
            }
            for j in nb {
                if mask.bits[j] && label[j] == usize::MAX {
                    label[j] = next;
                    stack.push(j);
                }
            }
        }
        if best.map_or(true, |(_, s)| size > s) {
            best = Some((next, size));
        }
        next += 1;
    }
    let bits = match best {
        Some((l, _)) => label.iter().map(|&v| v == l).collect(),
        None => vec![false; w * h],
    };
    Mask::new(w, h, bits).unwrap()
}

/// Cross-correlation with zero padding, one output cell at a time.
pub fn naive_conv(x: &Tensor, wt: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (wt.shape()[0], wt.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            acc += wt.at(&[oc, ic, ky, kx]) * x.at(&[ic, iy as usize, ix as usize]);
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out).unwrap()
}

pub fn naive_pool(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    for ch in 0..c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.at(&[ch, 2 * oy + dy, 2 * ox + dx]));
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(vec![c, h / 2, w / 2], out).unwrap()
}
