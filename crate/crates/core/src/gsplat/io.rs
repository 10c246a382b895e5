//! Image files: 8-bit PNG and raw little-endian `f32` dumps with a JSON
//! shape sidecar.

use super::{GsplatError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn image_err(e: impl std::fmt::Display) -> GsplatError {
    GsplatError::Image(e.to_string())
}

/// Quantize an `H·W·3` image in `[0,1]` to 8-bit RGB.
pub fn to_rgb8(color: &[f64], width: usize, height: usize) -> Result<image::RgbImage> {
    if color.len() != width * height * 3 {
        return Err(image_err("buffer does not match dimensions"));
    }
    let bytes = color
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| image_err("buffer does not match dimensions"))
}

pub fn write_png(path: &Path, color: &[f64], width: usize, height: usize) -> Result<()> {
    to_rgb8(color, width, height)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err)
}

/// Returns `(H·W·3 values in [0,1], width, height)`.
pub fn read_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path).map_err(image_err)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| b as f64 / 255.0)
        .collect();
    Ok((data, w as usize, h as usize))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// Writes `path` (raw values) and `path.json` (shape sidecar).
pub fn write_raw(path: &Path, data: &[f64], shape: &[usize]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(image_err("data length does not match shape"));
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let side = RawSidecar {
        shape: shape.to_vec(),
        dtype: "<f4".into(),
    };
    let json = serde_json::to_string_pretty(&side).map_err(image_err)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    let side: RawSidecar =
        serde_json::from_slice(&std::fs::read(sidecar_path(path))?).map_err(image_err)?;
    if side.dtype != "<f4" {
        return Err(image_err(format!("unsupported dtype {}", side.dtype)));
    }
    let bytes = std::fs::read(path)?;
    let n = side
        .shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| image_err("shape overflows"))?;
    if n.checked_mul(4) != Some(bytes.len()) {
        return Err(image_err("file size does not match shape"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((data, side.shape))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_raw_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img: Vec<f64> = (0..4 * 3 * 3).map(|i| i as f64 / 35.0).collect();
        let p = dir.path().join("a.png");
        write_png(&p, &img, 4, 3).unwrap();
        let (back, w, h) = read_png(&p).unwrap();
        assert_eq!((w, h), (4, 3));
        assert!(back
            .iter()
            .zip(&img)
            .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));

        let r = dir.path().join("a.f32");
        write_raw(&r, &img, &[3, 4, 3]).unwrap();
        let (vals, shape) = read_raw(&r).unwrap();
        assert_eq!(shape, vec![3, 4, 3]);
        assert!(vals.iter().zip(&img).all(|(a, b)| (a - b).abs() < 1e-7));
    }
}
