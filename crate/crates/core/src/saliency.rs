//! Saliency maps from perturbations: channel-averaged squared difference,
//! optional `[0,1]` normalization and gradient guidance, then a Gaussian blur.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::error::{Error, Result};
use crate::model::{forward_full, LayerSet, Mode, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// `[H,W]`, non-negative.
    pub values: Tensor,
    pub sigma: f64,
    pub guided: bool,
    pub normalized: bool,
    /// Perceptual layers of the perturbation that produced the map.
    pub layer_set: LayerSet,
}

impl SaliencyMap {
    /// Wraps an arbitrary non-negative map (oracle maps, baselines).
    pub fn from_values(values: Tensor) -> Result<Self> {
        values.expect_rank(2, "saliency map")?;
        if values.data().iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("saliency values must be non-negative"));
        }
        Ok(Self {
            values,
            sigma: 0.0,
            guided: false,
            normalized: false,
            layer_set: LayerSet::empty(),
        })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn with_layer_set(mut self, layer_set: LayerSet) -> Self {
        self.layer_set = layer_set;
        self
    }

    /// Writes `<stem>.pgm` for viewing and `<stem>.tns` for exact reloads.
    pub fn save(&self, stem: &Path) -> Result<()> {
        write_pgm(&self.values, &stem.with_extension("pgm"))?;
        container::write(
            &stem.with_extension("tns"),
            &json!({
                "sigma": self.sigma,
                "guided": self.guided,
                "normalized": self.normalized,
                "layer_set": self.layer_set,
            }),
            &[("saliency".to_string(), &self.values)],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = container::read(path)?;
        let values = tensors
            .into_iter()
            .find(|(n, _)| n == "saliency")
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(path, "no saliency tensor"))?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::format(path, format!("missing {k}")));
        Ok(Self {
            values,
            sigma: serde_json::from_value(field("sigma")?)?,
            guided: serde_json::from_value(field("guided")?)?,
            normalized: serde_json::from_value(field("normalized")?)?,
            layer_set: serde_json::from_value(field("layer_set")?)?,
        })
    }
}

/// `(1/C) * sum_c (x'[c] - x[c])^2` per pixel.
pub fn raw_map(x: &Tensor, x_prime: &Tensor) -> Result<Tensor> {
    x.expect_rank(3, "image")?;
    x.expect_same_shape(x_prime)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        let a = &x.data()[ch * plane..(ch + 1) * plane];
        let b = &x_prime.data()[ch * plane..(ch + 1) * plane];
        for ((o, p), q) in out.iter_mut().zip(a).zip(b) {
            let d = q - p;
            *o += d * d;
        }
    }
    let inv = 1.0 / c as f64;
    Tensor::new(vec![h, w], out.into_iter().map(|v| v * inv).collect())
}

/// Min-max rescale to `[0,1]`; a constant map becomes all zeros.
pub fn normalize01(map: &Tensor) -> Tensor {
    let (lo, hi) = (map.min(), map.max());
    if !(hi > lo) {
        return Tensor::zeros(map.shape());
    }
    let span = hi - lo;
    map.map(|v| (v - lo) / span)
}

/// Normalized 1-D Gaussian of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable zero-padded Gaussian blur of an `[H,W]` map.
pub fn gaussian_blur(map: &Tensor, sigma: f64) -> Result<Tensor> {
    map.expect_rank(2, "blur input")?;
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let data = blur_plane(map.data(), h, w, &gaussian_kernel(sigma));
    Tensor::new(vec![h, w], data)
}

/// Blurs every channel of a `[C,H,W]` image independently.
pub fn blur_channels(image: &Tensor, sigma: f64) -> Result<Tensor> {
    image.expect_rank(3, "blur input")?;
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let kernel = gaussian_kernel(sigma);
    let mut out = Vec::with_capacity(image.len());
    for ch in 0..c {
        out.extend(blur_plane(&image.data()[ch * h * w..(ch + 1) * h * w], h, w, &kernel));
    }
    Tensor::new(vec![c, h, w], out)
}

fn blur_plane(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let sx = x as isize + t as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += k * src[y * w + sx as usize];
                }
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let sy = y as isize + t as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += k * rows[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Channel-averaged `|d C_i / d x|`, divided by its maximum.
pub fn normalized_gradient(x: &Tensor, net: &Network, class: usize) -> Result<Tensor> {
    if net.mode() != Mode::SingleLabel {
        return Err(Error::invalid("guided saliency needs a single-label network"));
    }
    if class >= net.num_classes() {
        return Err(Error::invalid(format!(
            "class {class} out of range for {} classes",
            net.num_classes()
        )));
    }
    let mut fwd = forward_full(net, x)?;
    let score = fwd.graph.pick(fwd.logits, class)?;
    let grads = fwd.graph.backward(score)?;
    let g = grads.get_or_zeros(&fwd.graph, fwd.input).map(f64::abs);
    let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut avg = vec![0.0; h * w];
    for ch in 0..c {
        for (a, v) in avg.iter_mut().zip(&g.data()[ch * h * w..(ch + 1) * h * w]) {
            *a += v;
        }
    }
    let avg = Tensor::new(vec![h, w], avg.into_iter().map(|v| v / c as f64).collect())?;
    let peak = avg.max();
    if peak > 0.0 {
        Ok(avg.scale(1.0 / peak))
    } else {
        Ok(Tensor::zeros(&[h, w]))
    }
}

/// `raw * g` with `g` the normalized input gradient of class `class`.
pub fn guided_map(raw: &Tensor, x: &Tensor, net: &Network, class: usize) -> Result<Tensor> {
    let g = normalized_gradient(x, net, class)?;
    raw.zip_map(&g, |a, b| a * b)
}

/// raw -> optional normalize -> optional guidance -> blur.
pub fn build(
    x: &Tensor,
    x_prime: &Tensor,
    net: &Network,
    class: usize,
    sigma: f64,
    guided: bool,
    normalize_first: bool,
) -> Result<SaliencyMap> {
    let mut m = raw_map(x, x_prime)?;
    if normalize_first {
        m = normalize01(&m);
    }
    if guided {
        m = guided_map(&m, x, net, class)?;
    }
    Ok(SaliencyMap {
        values: gaussian_blur(&m, sigma)?,
        sigma,
        guided,
        normalized: normalize_first,
        layer_set: LayerSet::empty(),
    })
}

/// 16-bit binary PGM scaled so the map maximum is 65535.
pub fn write_pgm(map: &Tensor, path: &Path) -> Result<()> {
    map.expect_rank(2, "pgm map")?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let peak = map.max();
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(2 * h * w);
    for &v in map.data() {
        let q = if peak > 0.0 {
            (v.max(0.0) / peak * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkSpec;
    use proptest::prelude::*;

    #[test]
    fn raw_map_examples() {
        let x = Tensor::zeros(&[3, 2, 2]);
        assert_eq!(raw_map(&x, &x).unwrap(), Tensor::zeros(&[2, 2]));
        let mut d = vec![0.0; 12];
        d[4 + 3] = 0.3;
        let xp = Tensor::new(vec![3, 2, 2], d).unwrap();
        let m = raw_map(&x, &xp).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0, 0.0, 0.3 * 0.3 / 3.0]);
        assert!(raw_map(&x, &Tensor::zeros(&[3, 2, 3])).is_err());
    }

    #[test]
    fn normalize_examples() {
        let m = Tensor::from_vec(vec![0.0, 2.0, 4.0]);
        assert_eq!(normalize01(&m).data(), &[0.0, 0.5, 1.0]);
        assert_eq!(normalize01(&Tensor::full(&[2, 2], 3.0)), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn blur_identity_and_errors() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(gaussian_blur(&m, 0.0).unwrap(), m);
        assert!(gaussian_blur(&m, -1.0).is_err());
    }

    #[test]
    fn impulse_peak_matches_analytic_kernel() {
        let mut d = vec![0.0; 81];
        d[40] = 1.0;
        let out = gaussian_blur(&Tensor::new(vec![9, 9], d).unwrap(), 1.0).unwrap();
        let z: f64 = (-3i32..=3).map(|t| (-(t * t) as f64 / 2.0).exp()).sum();
        assert!((out.data()[40] - 1.0 / (z * z)).abs() < 1e-15);
        assert!((out.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_map_decays_at_border() {
        let out = gaussian_blur(&Tensor::full(&[12, 12], 1.0), 1.5).unwrap();
        assert!(out.at(&[6, 6]) > out.at(&[0, 6]));
        assert!(out.at(&[6, 6]) > out.at(&[0, 0]));
        assert!((out.at(&[6, 6]) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn blur_preserves_positivity(v in proptest::collection::vec(0.0f64..1.0, 64), sigma in 0.0f64..4.0) {
            let out = gaussian_blur(&Tensor::new(vec![8, 8], v).unwrap(), sigma).unwrap();
            prop_assert!(out.data().iter().all(|v| *v >= 0.0));
            prop_assert_eq!(out.shape(), &[8, 8]);
        }

        #[test]
        fn normalize_keeps_argmax(v in proptest::collection::vec(-5.0f64..5.0, 2..40)) {
            let t = Tensor::from_vec(v);
            prop_assume!(t.max() > t.min());
            let n = normalize01(&t);
            prop_assert_eq!(n.argmax(), t.argmax());
            prop_assert_eq!(n.min(), 0.0);
            prop_assert_eq!(n.max(), 1.0);
        }
    }

    #[test]
    fn build_without_options_is_raw() {
        let net = Network::init(NetworkSpec::mini_vgg(3, 32), 1).unwrap();
        let x = Tensor::full(&[3, 32, 32], 0.4);
        let xp = x.map(|v| v * 1.1);
        let s = build(&x, &xp, &net, 0, 0.0, false, false).unwrap();
        assert_eq!(s.values, raw_map(&x, &xp).unwrap());
    }

    #[test]
    fn guided_with_zero_gradient_is_zero() {
        let net = Network::init(NetworkSpec::mini_vgg(3, 32), 1).unwrap();
        let zeroed = Network::from_params(
            net.spec().clone(),
            net.params()
                .iter()
                .map(|g| g.iter().map(|t| Tensor::zeros(t.shape())).collect())
                .collect(),
        )
        .unwrap();
        let x = Tensor::full(&[3, 32, 32], 0.4);
        let raw = Tensor::full(&[32, 32], 0.7);
        assert_eq!(guided_map(&raw, &x, &zeroed, 1).unwrap(), Tensor::zeros(&[32, 32]));
    }

    #[test]
    fn sidecar_round_trip_and_pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let values = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.0, 2.0]).unwrap();
        let map = SaliencyMap::from_values(values).unwrap().with_layer_set(LayerSet::range(1, 3));
        let stem = dir.path().join("m");
        map.save(&stem).unwrap();
        assert_eq!(SaliencyMap::load(&stem.with_extension("tns")).unwrap(), map);
        let pgm = fs::read(stem.with_extension("pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(&pgm[pgm.len() - 2..], &[0xff, 0xff]);
    }
}
