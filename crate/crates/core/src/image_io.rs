//! PNG and `.npy` (little-endian float32) image files.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("malformed array file: {0}")]
    Malformed(String),
}

fn to_u8<T: Real>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `H × W × 3` image in `[0,1]` as 8-bit RGB.
pub fn save_png<T: Real>(img: &Array3<T>, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        *px = image::Rgb([to_u8(img[[y, x, 0]]), to_u8(img[[y, x, 1]]), to_u8(img[[y, x, 2]])]);
    }
    out.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes an `H × W` map in `[0,1]` as 8-bit greyscale.
pub fn save_mask_png<T: Real>(mask: &Array2<T>, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    let (h, w) = mask.dim();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        *px = image::Luma([to_u8(mask[[y as usize, x as usize]])]);
    }
    out.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png<T: Real>(path: impl AsRef<Path>) -> Result<Array3<T>, ImageIoError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        T::lit(img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    }))
}

pub fn load_mask_png<T: Real>(path: impl AsRef<Path>) -> Result<Array2<T>, ImageIoError> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        T::lit(img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
    }))
}

/// Writes any array as a version-1.0 `.npy` file with dtype `<f4`.
pub fn save_npy<T: Real>(arr: &ArrayD<T>, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    let shape = arr.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>();
    let shape = if shape.len() == 1 {
        format!("({},)", shape[0])
    } else {
        format!("({})", shape.join(", "))
    };
    let mut dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    let total = 10 + dict.len() + 1;
    let pad = (64 - total % 64) % 64;
    dict.push_str(&" ".repeat(pad));
    dict.push('\n');
    let mut bytes = Vec::with_capacity(10 + dict.len() + arr.len() * 4);
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    bytes.extend_from_slice(dict.as_bytes());
    for v in arr.iter() {
        bytes.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a C-order `<f4` `.npy` file.
pub fn load_npy<T: Real>(path: impl AsRef<Path>) -> Result<ArrayD<T>, ImageIoError> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| ImageIoError::Malformed(m.to_string());
    if bytes.len() < 10 || &bytes[..8] != b"\x93NUMPY\x01\x00" {
        return Err(bad("missing npy v1.0 magic"));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(|| bad("short header"))?)
        .map_err(|_| bad("header not utf-8"))?;
    if !header.contains("'descr': '<f4'") || !header.contains("'fortran_order': False") {
        return Err(bad("only C-order <f4 arrays are supported"));
    }
    let open = header.find("'shape': (").ok_or_else(|| bad("missing shape"))? + "'shape': (".len();
    let close = header[open..].find(')').ok_or_else(|| bad("unterminated shape"))? + open;
    let shape: Vec<usize> = header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("bad shape entry")))
        .collect::<Result<_, _>>()?;
    let data = &bytes[10 + hlen..];
    let n: usize = shape.iter().product();
    if data.len() != n * 4 {
        return Err(bad("payload size does not match shape"));
    }
    let values: Vec<T> = data
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| ImageIoError::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npy_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        let a = ArrayD::from_shape_fn(IxDyn(&[3, 4, 3]), |ix| (ix[0] * 12 + ix[1] * 3 + ix[2]) as f32 * 0.1);
        save_npy(&a, &p).unwrap();
        let b: ArrayD<f32> = load_npy(&p).unwrap();
        assert_eq!(a, b);
        let raw = fs::read(&p).unwrap();
        assert_eq!((10 + u16::from_le_bytes([raw[8], raw[9]]) as usize) % 64, 0);
    }

    #[test]
    fn png_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let a = Array3::from_shape_fn((2, 3, 3), |(y, x, c)| (y + x + c) as f64 / 6.0);
        save_png(&a, &p).unwrap();
        let b: Array3<f64> = load_png(&p).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
