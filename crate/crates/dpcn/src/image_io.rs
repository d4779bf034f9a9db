//! Heatmap export: binary PGM (P5) for the map itself and a PPM (P6)
//! overlay of the map on the input image.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale P5 with maxval 255; `values` in [0,1], row-major.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Shape(format!(
            "pgm: {} values for {width}x{height}",
            values.len()
        )));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values.iter().map(|&v| to_byte(v)).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// P6 overlay: the (3,H,W) image rescaled to [0,1], blended with a
/// blue-to-red rendering of the heatmap.
pub fn write_ppm_overlay(path: &Path, image: &Tensor, heat: &[f64]) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("overlay wants a (3,H,W) image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if heat.len() != h * w {
        return Err(Error::Shape(format!("overlay: heatmap {} vs image {h}x{w}", heat.len())));
    }
    let lo = image.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let plane = h * w;
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        let heatv = heat[p].clamp(0.0, 1.0);
        for c in 0..3 {
            let gray = (image.data()[c * plane + p] - lo) / span;
            let tint = match c {
                0 => heatv,
                1 => 0.1 * heatv,
                _ => 1.0 - heatv,
            };
            bytes.push(to_byte(0.5 * gray + 0.5 * tint));
        }
    }
    f.write_all(&bytes)?;
    Ok(())
}
