//! Synthetic concealed-shapes dataset, its on-disk layout, and preprocessing.

mod generate;
mod preprocess;
mod store;

pub use generate::{gen_concealed_shapes, sample_seed, Sample, ShapeClass, NUM_CLASSES};
pub use preprocess::{normalize_value, preprocess, Prepared, PreprocessConfig, MEANS, PAD_VALUE, STDS};
pub use store::{load_dataset, save_dataset, Dataset, DatasetMeta};

/// Normalised `(cx, cy, w, h)` box.
pub type BBox = [f64; 4];

/// Intersection over union of two `(cx, cy, w, h)` boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let corners = |r: &BBox| (r[0] - r[2] / 2.0, r[1] - r[3] / 2.0, r[0] + r[2] / 2.0, r[1] + r[3] / 2.0);
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
