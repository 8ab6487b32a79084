//! Minimal image I/O: 8-bit PNG/PGM/PPM in, PNG out, bilinear resize.
//!
//! Pixels live in `[0, 1]` as `[c, h, w]` tensors with `c` of 1 or 3;
//! quantization back to 8-bit happens only when writing files, with
//! round-half-to-even.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SUPPORTED: &[&str] = &["png", "pgm", "ppm"];

fn check_extension(path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    if SUPPORTED.contains(&ext.as_str()) {
        Ok(())
    } else {
        Err(Error::Image(format!(
            "unsupported image format '{}' for {} (supported: png, pgm, ppm)",
            ext,
            path.display()
        )))
    }
}

/// Decode an image file to `[c, h, w]` in `[0, 1]`, c = 1 (gray) or 3 (RGB).
pub fn read_image(path: &Path) -> Result<Tensor> {
    check_extension(path)?;
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))?;
    let (t, _) = match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data: Vec<f64> = g.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
            (Tensor::new(vec![1, h, w], data)?, 1)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let mut data = vec![0.0; 3 * h * w];
            for (i, p) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    data[ch * h * w + i] = p.0[ch] as f64 / 255.0;
                }
            }
            (Tensor::new(vec![3, h, w], data)?, 3)
        }
    };
    Ok(t)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Encode `[c, h, w]` (c = 1 or 3) as 8-bit PNG, written atomically.
pub fn write_image_png(path: &Path, t: &Tensor) -> Result<()> {
    let shape = t.shape();
    if shape.len() != 3 || (shape[0] != 1 && shape[0] != 3) {
        return Err(Error::dim(format!("write_image_png: shape {:?}", shape)));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut buf = Vec::new();
    {
        let mut cursor = std::io::Cursor::new(&mut buf);
        if c == 1 {
            let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([quantize(t.data()[y as usize * w + x as usize])])
            });
            img.write_to(&mut cursor, ImageFormat::Png)
                .map_err(|e| Error::Image(e.to_string()))?;
        } else {
            let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                image::Rgb([
                    quantize(t.data()[i]),
                    quantize(t.data()[h * w + i]),
                    quantize(t.data()[2 * h * w + i]),
                ])
            });
            img.write_to(&mut cursor, ImageFormat::Png)
                .map_err(|e| Error::Image(e.to_string()))?;
        }
    }
    write_atomic(path, &buf)
}

/// Write bytes via a temp file + rename in the target directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Bilinear resize of `[c, h, w]` to `[c, oh, ow]`.
pub fn resize_bilinear(t: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let shape = t.shape();
    if shape.len() != 3 {
        return Err(Error::dim(format!("resize: shape {:?}", shape)));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if (h, w) == (oh, ow) {
        return Ok(t.clone());
    }
    let mut out = vec![0.0; c * oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for ch in 0..c {
        for oi in 0..oh {
            let fy = ((oi as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for oj in 0..ow {
                let fx = ((oj as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let p = |yy: usize, xx: usize| t.data()[(ch * h + yy) * w + xx];
                out[(ch * oh + oi) * ow + oj] = p(y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + p(y0, x1) * (1.0 - wy) * wx
                    + p(y1, x0) * wy * (1.0 - wx)
                    + p(y1, x1) * wy * wx;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Collapse RGB to grayscale with the usual luma weights; gray passes through.
pub fn to_gray(t: &Tensor) -> Result<Tensor> {
    let shape = t.shape();
    match shape {
        [1, _, _] => Ok(t.clone()),
        [3, h, w] => {
            let (h, w) = (*h, *w);
            let mut out = vec![0.0; h * w];
            for i in 0..h * w {
                out[i] = 0.299 * t.data()[i]
                    + 0.587 * t.data()[h * w + i]
                    + 0.114 * t.data()[2 * h * w + i];
            }
            Tensor::new(vec![1, h, w], out)
        }
        s => Err(Error::dim(format!("to_gray: shape {:?}", s))),
    }
}

/// Replicate gray to 3 channels; RGB passes through.
pub fn to_rgb(t: &Tensor) -> Result<Tensor> {
    let shape = t.shape();
    match shape {
        [3, _, _] => Ok(t.clone()),
        [1, h, w] => {
            let (h, w) = (*h, *w);
            let mut out = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                out.extend_from_slice(t.data());
            }
            Tensor::new(vec![3, h, w], out)
        }
        s => Err(Error::dim(format!("to_rgb: shape {:?}", s))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_extension() {
        assert!(read_image(Path::new("x.jpeg")).is_err());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let t = Tensor::full(&[1, 7, 9], 0.4);
        let r = resize_bilinear(&t, 12, 12).unwrap();
        for v in r.data() {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let t = Tensor::from_fn(&[3, 4, 5], |i| (i % 256) as f64 / 255.0);
        write_image_png(&path, &t).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.shape(), &[3, 4, 5]);
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-9);
        }
    }
}
