use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const OTSU_BINS: usize = 256;

/// Result of Otsu's method on a 256-bin histogram over `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Otsu {
    pub min: f64,
    pub max: f64,
    /// Last bin of the lower class.
    pub bin: usize,
    /// Lower edge of bin `bin + 1`; values at or above it form the upper class.
    pub threshold: f64,
}

impl Otsu {
    pub fn bin_of(&self, v: f64) -> usize {
        let t = (v - self.min) / (self.max - self.min) * OTSU_BINS as f64;
        (t.max(0.0) as usize).min(OTSU_BINS - 1)
    }

    pub fn is_upper(&self, v: f64) -> bool {
        self.bin_of(v) > self.bin
    }
}

/// Full 256-bit product of two `u128`s as `(high, low)`.
fn mul_wide(a: u128, b: u128) -> (u128, u128) {
    let mask = u64::MAX as u128;
    let (a1, a0) = (a >> 64, a & mask);
    let (b1, b0) = (b >> 64, b & mask);
    let p00 = a0 * b0;
    let p01 = a0 * b1;
    let p10 = a1 * b0;
    let mid = (p00 >> 64) + (p01 & mask) + (p10 & mask);
    let lo = (p00 & mask) | (mid << 64);
    let hi = a1 * b1 + (p01 >> 64) + (p10 >> 64) + (mid >> 64);
    (hi, lo)
}

/// Otsu's threshold over a flat set of values. The between-class variance
/// of every split is compared exactly in integer arithmetic, and the lowest
/// maximising split wins ties.
pub fn otsu(values: &[f64]) -> Result<Otsu> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) || !min.is_finite() || !max.is_finite() {
        return Err(Error::DegenerateHistogram);
    }
    let mut r = Otsu {
        min,
        max,
        bin: 0,
        threshold: 0.0,
    };
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[r.bin_of(v)] += 1;
    }
    let total = values.len() as u128;
    let sum: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    // sigma_b^2 is proportional to (sum * n0 - total * s0)^2 / (n0 * (total - n0))
    let mut best: Option<(usize, u128, u128)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for (t, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        n0 += c as u128;
        s0 += t as u128 * c as u128;
        if n0 == 0 || n0 == total {
            continue;
        }
        let diff = (sum * n0).abs_diff(total * s0);
        let num = diff * diff;
        let den = n0 * (total - n0);
        let better = match best {
            None => true,
            Some((_, bnum, bden)) => mul_wide(num, bden) > mul_wide(bnum, den),
        };
        if better {
            best = Some((t, num, den));
        }
    }
    let (bin, _, _) = best.ok_or(Error::DegenerateHistogram)?;
    r.bin = bin;
    r.threshold = min + (bin + 1) as f64 * (max - min) / OTSU_BINS as f64;
    Ok(r)
}

pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    otsu(values).map(|o| o.threshold)
}

/// Keeps entries in the upper Otsu class at their original magnitude and
/// zeroes the rest.
pub fn attention_map_enhance(map: &Tensor<f64>) -> Result<Tensor<f64>> {
    let o = otsu(map.data())?;
    Ok(map.map(|v| if o.is_upper(v) { v } else { 0.0 }))
}
