//! Single-object detection metrics.
//!
//! With exactly one object per image there is nothing to rank, so AP at a
//! threshold is the fraction of samples whose class is right and whose box
//! reaches that IoU, and AR averages the same indicator over the thresholds
//! `0.50, 0.55, ..., 0.95`.

use serde::{Deserialize, Serialize};

use crate::data::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub mean_iou: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
}

pub fn ar_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

pub fn score(preds: &[Prediction], truth: &[(usize, BBox)]) -> Scores {
    assert_eq!(preds.len(), truth.len(), "one prediction per sample");
    let n = preds.len().max(1) as f64;
    let mut s = Scores::default();
    let thresholds = ar_thresholds();
    for (p, (label, gt)) in preds.iter().zip(truth) {
        let correct = p.label == *label;
        let overlap = p.bbox.map_or(0.0, |b| iou(&b, gt));
        s.accuracy += correct as u8 as f64;
        s.mean_iou += overlap;
        // small slack so a threshold is met when IoU equals it up to rounding
        let hit = |t: f64| correct && overlap >= t - 1e-12;
        s.ap50 += hit(0.5) as u8 as f64;
        s.ap75 += hit(0.75) as u8 as f64;
        s.ar += thresholds.iter().filter(|&&t| hit(t)).count() as f64 / thresholds.len() as f64;
    }
    s.accuracy /= n;
    s.mean_iou /= n;
    s.ap50 /= n;
    s.ap75 /= n;
    s.ar /= n;
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    #[serde(flatten)]
    pub scores: Scores,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "step,loss,accuracy,mean_iou,ap50,ap75,ar";

    pub fn csv_row(&self) -> String {
        let s = &self.scores;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss, s.accuracy, s.mean_iou, s.ap50, s.ap75, s.ar
        )
    }
}
