use std::fs;
use std::path::Path;

use crate::error::{shape_err, Result};

/// Min-max scales `values` to `0..=255`; a constant input maps to zeros.
pub fn scale_to_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Binary greyscale PGM (`P5`).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(shape_err("write_pgm", format!("{} pixels for {width}x{height}", pixels.len())));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf)?;
    Ok(())
}

/// Binary colour PPM (`P6`) from interleaved RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(shape_err("write_ppm", format!("{} bytes for {width}x{height} RGB", rgb.len())));
    }
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(rgb);
    fs::write(path, buf)?;
    Ok(())
}
