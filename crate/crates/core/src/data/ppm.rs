//! Binary PPM (P6, maxval 255) images as `[3,H,W]` tensors in `[0,1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode(image: &Tensor) -> Result<Vec<u8>> {
    image.expect_rank(3, "ppm image")?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != 3 {
        return Err(Error::shape(format!("ppm needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = image.data();
    for i in 0..h * w {
        for ch in 0..3 {
            let v = (d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round();
            out.push(v as u8);
        }
    }
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated ppm header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::format(path, format!("expected P6 magic, found {:?}", fields[0])));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad {what} {s:?}")))
    };
    let w = parse(&fields[1], "width")?;
    let h = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::format(path, format!("only maxval 255 supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(path, "zero image extent"));
    }
    // exactly one whitespace byte separates header and raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "missing separator before raster"));
    }
    pos += 1;
    let need = 3 * w * h;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: pos + need,
            found: bytes.len(),
        });
    }
    let mut data = vec![0.0; need];
    for i in 0..w * h {
        for ch in 0..3 {
            data[ch * w * h + i] = f64::from(raster[3 * i + ch]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_image_is_zero() {
        let bytes = b"P6\n2 2\n255\n\0\0\0\0\0\0\0\0\0\0\0\0";
        let t = decode(bytes, Path::new("m")).unwrap();
        assert_eq!(t, Tensor::zeros(&[3, 2, 2]));
    }

    #[test]
    fn red_pixel() {
        let bytes = b"P6 1 1 255\n\xff\x00\x00";
        let t = decode(bytes, Path::new("m")).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn comments_are_skipped() {
        let bytes = b"P6\n# made by hand\n1 1\n255\n\x00\xff\x00";
        assert_eq!(decode(bytes, Path::new("m")).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn malformed_and_truncated() {
        assert!(matches!(decode(b"P3\n1 1\n255\n", Path::new("m")), Err(Error::Format { .. })));
        assert!(matches!(decode(b"P6\n1 1\n65535\n", Path::new("m")), Err(Error::Format { .. })));
        assert!(matches!(decode(b"P6\n2 1\n255\n\0\0\0\0\0", Path::new("m")), Err(Error::Truncated { .. })));
        assert!(decode(b"P6\n2", Path::new("m")).is_err());
    }

    #[test]
    fn write_read_within_quantization() {
        let data: Vec<f64> = (0..3 * 5 * 4).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let t = Tensor::new(vec![3, 5, 4], data).unwrap();
        let back = decode(&encode(&t).unwrap(), Path::new("m")).unwrap();
        assert!(back.max_abs_diff(&t).unwrap() <= 1.0 / 255.0);
    }
}
