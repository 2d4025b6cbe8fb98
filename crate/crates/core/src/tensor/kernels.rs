//! Straight loop kernels shared by the eager ops and the graph.
//!
//! All buffers are row-major. Backward kernels accumulate (`+=`) into the
//! gradient buffers they are handed.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output columns `ow` whose input column `ow*stride + k - pad` is in range.
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        valid_range(self.ow, self.w, self.stride, k, self.pad)
    }

    fn valid_rows(&self, k: usize) -> (usize, usize) {
        valid_range(self.oh, self.h, self.stride, k, self.pad)
    }
}

/// Half-open range of output positions `o` with `0 <= o*stride + k - pad < n_in`.
fn valid_range(n_out: usize, n_in: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > k {
        ((n_in - 1 + pad - k) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds the input into a `[c_in*kh*kw, oh*ow]` patch matrix.
fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let p = g.oh * g.ow;
    let mut col = vec![0.0; g.c_in * g.kh * g.kw * p];
    for ci in 0..g.c_in {
        let in_plane = &input[ci * plane_in..(ci + 1) * plane_in];
        for ky in 0..g.kh {
            let (r0, r1) = g.valid_rows(ky);
            for kx in 0..g.kw {
                let (c0, c1) = g.valid_cols(kx);
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in r0..r1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    for ox in c0..c1 {
                        dst[ox] = in_plane[iy * g.w + ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
    col
}

/// Adds a patch-matrix gradient back onto the input positions it came from.
fn col2im(g: &ConvGeom, col: &[f64], grad_in: &mut [f64]) {
    let plane_in = g.h * g.w;
    let p = g.oh * g.ow;
    for ci in 0..g.c_in {
        let gi_plane = &mut grad_in[ci * plane_in..(ci + 1) * plane_in];
        for ky in 0..g.kh {
            let (r0, r1) = g.valid_rows(ky);
            for kx in 0..g.kw {
                let (c0, c1) = g.valid_cols(kx);
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in r0..r1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    for ox in c0..c1 {
                        gi_plane[iy * g.w + ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// `c = alpha * a b + beta * c` for row-major `a: [m,k]` and `b: [k,n]`
/// given as (row stride, column stride) pairs.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides address `a` as m x k, `b` as k x n and `c` as a
    // dense row-major m x n block, all within the slices' bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let k = g.c_in * g.kh * g.kw;
    let p = g.oh * g.ow;
    for co in 0..g.c_out {
        out[co * p..(co + 1) * p].fill(bias[co]);
    }
    let col = im2col(g, input);
    gemm(g.c_out, k, p, weight, (k as isize, 1), &col, (p as isize, 1), 1.0, out);
}

pub(crate) fn conv2d_backward_input(
    g: &ConvGeom,
    weight: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
) {
    let k = g.c_in * g.kh * g.kw;
    let p = g.oh * g.ow;
    let mut col = vec![0.0; k * p];
    // weight transposed: element (r, co) sits at co * k + r
    gemm(k, g.c_out, p, weight, (1, k as isize), grad_out, (p as isize, 1), 0.0, &mut col);
    col2im(g, &col, grad_in);
}

pub(crate) fn conv2d_backward_weight(
    g: &ConvGeom,
    input: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let k = g.c_in * g.kh * g.kw;
    let p = g.oh * g.ow;
    for co in 0..g.c_out {
        grad_b[co] += grad_out[co * p..(co + 1) * p].iter().sum::<f64>();
    }
    let col = im2col(g, input);
    gemm(g.c_out, p, k, grad_out, (p as isize, 1), &col, (1, p as isize), 1.0, grad_w);
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// 2x2 non-overlapping max pool. Returns, per output cell, the flat input
/// index of the winning cell (first in row-major window order on ties).
pub(crate) fn maxpool2_forward(
    c: usize,
    h: usize,
    w: usize,
    input: &[f64],
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ch * h * w;
                let cand = [
                    base + (2 * oy) * w + 2 * ox,
                    base + (2 * oy) * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = cand[0];
                for &idx in &cand[1..] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = input[best];
                argmax[o] = best;
            }
        }
    }
}

pub(crate) fn linear_forward(
    k: usize,
    f: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    for (r, o) in out.iter_mut().enumerate().take(k) {
        *o = bias[r] + dot(&weight[r * f..(r + 1) * f], input);
    }
}

pub(crate) fn linear_backward_input(
    k: usize,
    f: usize,
    weight: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
) {
    for r in 0..k {
        let g = grad_out[r];
        if g == 0.0 {
            continue;
        }
        for (gi, &wv) in grad_in.iter_mut().zip(&weight[r * f..(r + 1) * f]) {
            *gi += g * wv;
        }
    }
}

pub(crate) fn linear_backward_weight(
    k: usize,
    f: usize,
    input: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    for r in 0..k {
        let g = grad_out[r];
        grad_b[r] += g;
        if g == 0.0 {
            continue;
        }
        for (gw, &x) in grad_w[r * f..(r + 1) * f].iter_mut().zip(input) {
            *gw += g * x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for n_in in 1..9 {
            for stride in 1..4 {
                for pad in 0..3 {
                    for k in 0..5 {
                        if n_in + 2 * pad < k + 1 {
                            continue;
                        }
                        let n_out = (n_in + 2 * pad - (k + 1)) / stride + 1 + 2;
                        let (lo, hi) = valid_range(n_out, n_in, stride, k, pad);
                        for o in 0..n_out {
                            let i = (o * stride + k) as isize - pad as isize;
                            let inside = i >= 0 && (i as usize) < n_in;
                            assert_eq!(inside, o >= lo && o < hi, "{n_in} {stride} {pad} {k} {o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (1..=7).map(f64::from).collect();
        let b = vec![1.0; 7];
        assert_eq!(dot(&a, &b), 28.0);
    }
}
