use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nearest_index_map;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{BBox, Sample};

pub const MEANS: [f64; 3] = [123.675, 116.28, 103.53];
pub const STDS: [f64; 3] = [58.395, 57.12, 57.375];
pub const PAD_VALUE: f64 = 114.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub flip_prob: f64,
    /// Resize ratio drawn uniformly from `[low, high]`; aspect is kept.
    pub ratio_range: [f64; 2],
    /// Square output extent; `None` uses the sample's own size.
    pub crop_size: Option<usize>,
    /// Boxes narrower or shorter than this (normalised) are dropped.
    pub min_extent: f64,
    pub means: [f64; 3],
    pub stds: [f64; 3],
    pub pad_value: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            flip_prob: 0.5,
            ratio_range: [0.1, 2.0],
            crop_size: None,
            min_extent: 1e-2,
            means: MEANS,
            stds: STDS,
            pad_value: PAD_VALUE,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.ratio_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::Config(format!("ratio_range needs 0 < low < high, got [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if self.crop_size == Some(0) || self.stds.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("crop_size and stds must be positive".into()));
        }
        Ok(())
    }
}

/// `(v - mean_c) / std_c` with the default constants.
pub fn normalize_value(v: f64, channel: usize) -> f64 {
    (v - MEANS[channel]) / STDS[channel]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// `[3, crop, crop]`, normalised.
    pub image: Tensor<f64>,
    /// `None` when augmentation shrank or cropped the box below `min_extent`.
    pub bbox: Option<BBox>,
}

/// Train path: flip, resize, crop, drop tiny boxes, then normalise with
/// padding. Eval path: normalise and pad only. `seed` drives every random
/// choice, so the result is a pure function of its arguments.
pub fn preprocess(sample: &Sample, cfg: &PreprocessConfig, train: bool, seed: u64) -> Prepared {
    let (h, w) = (sample.height, sample.width);
    let crop = cfg.crop_size.unwrap_or(h.max(w));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bbox = sample.bbox;

    let flip = train && rng.gen_bool(cfg.flip_prob);
    if flip {
        bbox[0] = 1.0 - bbox[0];
    }
    let (rh, rw) = if train {
        let r = rng.gen_range(cfg.ratio_range[0]..=cfg.ratio_range[1]);
        (
            ((h as f64 * r).round() as usize).max(1),
            ((w as f64 * r).round() as usize).max(1),
        )
    } else {
        (h, w)
    };
    let (oy, ox) = if train {
        (
            if rh > crop { rng.gen_range(0..=rh - crop) } else { 0 },
            if rw > crop { rng.gen_range(0..=rw - crop) } else { 0 },
        )
    } else {
        (0, 0)
    };
    let ys = nearest_index_map(h, rh);
    let xs = nearest_index_map(w, rw);

    let mut out = Vec::with_capacity(3 * crop * crop);
    for c in 0..3 {
        let padded = (cfg.pad_value - cfg.means[c]) / cfg.stds[c];
        for y in 0..crop {
            for x in 0..crop {
                let (ry, rx) = (y + oy, x + ox);
                if ry >= rh || rx >= rw {
                    out.push(padded);
                    continue;
                }
                let sx = if flip { w - 1 - xs[rx] } else { xs[rx] };
                let v = sample.image[(c * h + ys[ry]) * w + sx] as f64;
                out.push((v - cfg.means[c]) / cfg.stds[c]);
            }
        }
    }

    // box corners in resized pixels, shifted into the crop window
    let x0 = ((bbox[0] - bbox[2] / 2.0) * rw as f64 - ox as f64).clamp(0.0, crop as f64);
    let x1 = ((bbox[0] + bbox[2] / 2.0) * rw as f64 - ox as f64).clamp(0.0, crop as f64);
    let y0 = ((bbox[1] - bbox[3] / 2.0) * rh as f64 - oy as f64).clamp(0.0, crop as f64);
    let y1 = ((bbox[1] + bbox[3] / 2.0) * rh as f64 - oy as f64).clamp(0.0, crop as f64);
    let cs = crop as f64;
    let b = [(x0 + x1) / (2.0 * cs), (y0 + y1) / (2.0 * cs), (x1 - x0) / cs, (y1 - y0) / cs];
    let bbox = (b[2] >= cfg.min_extent && b[3] >= cfg.min_extent).then_some(b);
    Prepared {
        image: Tensor::new(vec![3, crop, crop], out).expect("sized above"),
        bbox,
    }
}
