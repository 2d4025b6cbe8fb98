//! Eager layer evaluation on plain tensors.
//!
//! These are the same kernels the graph records, without bookkeeping for
//! gradients. Shape validation lives here and is reused by [`CompGraph`].
//!
//! [`CompGraph`]: super::CompGraph

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

pub const BATCHNORM_EPS: f64 = 1e-5;

pub(crate) fn conv_geom(
    input: &[usize],
    weight: &[usize],
    bias: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if input.len() != 3 {
        return Err(Error::shape(format!(
            "conv2d input must be [C,H,W], got {input:?}"
        )));
    }
    if weight.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d weight must be [Cout,Cin,kH,kW], got {weight:?}"
        )));
    }
    let (c_in, h, w) = (input[0], input[1], input[2]);
    let (c_out, wc_in, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv2d weight expects {wc_in} input channels, input has {c_in}"
        )));
    }
    if bias != [c_out] {
        return Err(Error::shape(format!(
            "conv2d bias must be [{c_out}], got {bias:?}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(format!(
            "conv2d kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    let span_h = h + 2 * pad;
    let span_w = w + 2 * pad;
    if span_h < kh || span_w < kw {
        return Err(Error::shape(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {span_h}x{span_w}"
        )));
    }
    if (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
        return Err(Error::shape(format!(
            "conv2d output extent not integral: (H+2p-kH)={} (W+2p-kW)={} stride {stride}",
            span_h - kh,
            span_w - kw
        )));
    }
    Ok(ConvGeom {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        pad,
        oh: (span_h - kh) / stride + 1,
        ow: (span_w - kw) / stride + 1,
    })
}

pub(crate) fn pool_shape(input: &[usize]) -> Result<[usize; 3]> {
    if input.len() != 3 {
        return Err(Error::shape(format!(
            "maxpool2 input must be [C,H,W], got {input:?}"
        )));
    }
    if input[1] % 2 != 0 || input[2] % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2 needs even spatial extents, got {}x{}",
            input[1], input[2]
        )));
    }
    Ok([input[0], input[1] / 2, input[2] / 2])
}

pub(crate) fn linear_dims(input: &Tensor, weight: &[usize], bias: &[usize]) -> Result<(usize, usize)> {
    if weight.len() != 2 {
        return Err(Error::shape(format!(
            "linear weight must be [K,F], got {weight:?}"
        )));
    }
    let (k, f) = (weight[0], weight[1]);
    if input.len() != f || input.ndim() != 1 {
        return Err(Error::shape(format!(
            "linear expects input [{f}], got {:?}",
            input.shape()
        )));
    }
    if bias != [k] {
        return Err(Error::shape(format!(
            "linear bias must be [{k}], got {bias:?}"
        )));
    }
    Ok((k, f))
}

/// Per-channel `(scale, shift)` of an inference-mode batch norm.
pub(crate) fn batchnorm_affine(
    input: &[usize],
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Vec<f64>> {
    if input.len() != 3 {
        return Err(Error::shape(format!(
            "batchnorm input must be [C,H,W], got {input:?}"
        )));
    }
    let c = input[0];
    for (name, t) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(Error::shape(format!(
                "batchnorm {name} must be [{c}], got {:?}",
                t.shape()
            )));
        }
    }
    if let Some(v) = var.data().iter().find(|v| **v < 0.0) {
        return Err(Error::invalid(format!("batchnorm variance {v} is negative")));
    }
    Ok(var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect())
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(input.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let mut out = vec![0.0; g.c_out * g.oh * g.ow];
    kernels::conv2d_forward(&g, input.data(), weight.data(), bias.data(), &mut out);
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    let [c, oh, ow] = pool_shape(input.shape())?;
    let n = c * oh * ow;
    let mut out = vec![0.0; n];
    let mut arg = vec![0; n];
    kernels::maxpool2_forward(c, 2 * oh, 2 * ow, input.data(), &mut out, &mut arg);
    Tensor::new(vec![c, oh, ow], out)
}

pub fn batchnorm_eval(
    input: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let inv_std = batchnorm_affine(input.shape(), mean, var, gamma, beta, eps)?;
    let plane = input.shape()[1] * input.shape()[2];
    let mut out = input.data().to_vec();
    for (c, chunk) in out.chunks_mut(plane).enumerate() {
        let (m, s, b) = (mean.data()[c], inv_std[c] * gamma.data()[c], beta.data()[c]);
        for v in chunk {
            *v = (*v - m) * s + b;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (k, f) = linear_dims(input, weight.shape(), bias.shape())?;
    let mut out = vec![0.0; k];
    kernels::linear_forward(k, f, input.data(), weight.data(), bias.data(), &mut out);
    Ok(Tensor::from_vec(out))
}

/// Numerically stable softmax of a vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
