//! Confusion-matrix accumulation, per-class IoU and mean IoU.
//!
//! Counts accumulate into a single K x K matrix over a whole split; the mean
//! is taken over classes whose union is non-empty. Label value 255 is the
//! ignore index and never scored.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label value excluded from scoring and loss.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction value {value} out of range for {classes} classes")]
    PredOutOfRange { value: u8, classes: usize },
    #[error("ground-truth value {value} out of range for {classes} classes (255 = ignore)")]
    GtOutOfRange { value: u8, classes: usize },
    #[error("prediction and ground truth sizes differ: {pred} vs {gt}")]
    SizeMismatch { pred: usize, gt: usize },
    #[error("class name count {names} does not match class count {classes}")]
    NameCountMismatch { names: usize, classes: usize },
}

/// K x K co-occurrence counts; `counts[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Total scored pixels.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Score one prediction/ground-truth pair of equal length. Ignored pixels
    /// (gt = 255) contribute nothing; out-of-range predictions are a model
    /// bug and surface as errors.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<(), MetricsError> {
        if pred.len() != gt.len() {
            return Err(MetricsError::SizeMismatch {
                pred: pred.len(),
                gt: gt.len(),
            });
        }
        let k = self.classes;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == IGNORE_INDEX {
                continue;
            }
            if (g as usize) >= k {
                return Err(MetricsError::GtOutOfRange {
                    value: g,
                    classes: k,
                });
            }
            if (p as usize) >= k {
                return Err(MetricsError::PredOutOfRange {
                    value: p,
                    classes: k,
                });
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise merge of per-shard matrices (associative, commutative).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
    }

    /// Per-class intersection-over-union; classes absent from both prediction
    /// and ground truth have an empty union and are undefined (None).
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..k).filter(|&g| g != c).map(|g| self.count(g, c)).sum();
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let union = tp + fp + fn_;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over defined classes; None when every class is undefined.
    pub fn mean_iou(&self) -> Option<f64> {
        let ious = self.iou_per_class();
        let defined: Vec<f64> = ious.into_iter().flatten().collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

/// Per-class scores plus summary, with a stable column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub class_names: Vec<String>,
    /// Per-class IoU; None marks classes with empty union.
    pub iou: Vec<Option<f64>>,
    pub mean_iou: Option<f64>,
    pub scored_pixels: u64,
}

impl MetricReport {
    pub fn from_matrix(cm: &ConfusionMatrix, class_names: &[String]) -> Result<Self, MetricsError> {
        if class_names.len() != cm.classes() {
            return Err(MetricsError::NameCountMismatch {
                names: class_names.len(),
                classes: cm.classes(),
            });
        }
        Ok(Self {
            class_names: class_names.to_vec(),
            iou: cm.iou_per_class(),
            mean_iou: cm.mean_iou(),
            scored_pixels: cm.total(),
        })
    }

    /// Human-readable table, IoU in percent at 0.1% precision.
    pub fn render_table(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(|n| n.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        out.push_str(&format!("{:<width$}  IoU(%)\n", "class"));
        for (name, iou) in self.class_names.iter().zip(self.iou.iter()) {
            match iou {
                Some(v) => out.push_str(&format!("{name:<width$}  {:6.1}\n", v * 100.0)),
                None => out.push_str(&format!("{name:<width$}  {:>6}\n", "n/a")),
            }
        }
        match self.mean_iou {
            Some(m) => out.push_str(&format!("{:<width$}  {:6.1}\n", "mIoU", m * 100.0)),
            None => out.push_str(&format!("{:<width$}  {:>6}\n", "mIoU", "n/a")),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_fill_the_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        let gt = vec![0u8, 1, 2, 1, 0, 2];
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.total(), 6);
        assert_eq!(cm.count(0, 0) + cm.count(1, 1) + cm.count(2, 2), 6);
        assert_eq!(cm.mean_iou(), Some(1.0));
    }

    #[test]
    fn all_ignored_changes_nothing() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2], &[255, 255, 255]).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.mean_iou(), None);
    }

    #[test]
    fn two_by_two_hand_case() {
        // gt [[0,0],[1,1]], pred [[0,1],[1,1]]
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.count(1, 0), 0);
        // IoU_0 = 1/2, IoU_1 = 2/3, mIoU = 7/12
        let iou = cm.iou_per_class();
        assert_eq!(iou[0], Some(0.5));
        assert_eq!(iou[1], Some(2.0 / 3.0));
        let miou = cm.mean_iou().unwrap();
        assert!((miou - 7.0 / 12.0).abs() < 1e-15, "mIoU {miou} vs 7/12");
    }

    #[test]
    fn disjoint_predictions_score_zero() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1, 1, 1], &[0, 0, 0]).unwrap();
        assert_eq!(cm.iou_per_class(), vec![Some(0.0), Some(0.0)]);
        assert_eq!(cm.mean_iou(), Some(0.0));
    }

    #[test]
    fn out_of_range_prediction_is_an_error() {
        let mut cm = ConfusionMatrix::new(3);
        assert_eq!(
            cm.accumulate(&[3], &[0]),
            Err(MetricsError::PredOutOfRange {
                value: 3,
                classes: 3
            })
        );
    }

    #[test]
    fn merge_is_elementwise_and_matches_streaming() {
        let mut a = ConfusionMatrix::new(2);
        a.accumulate(&[0, 1], &[0, 0]).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.accumulate(&[1, 1], &[1, 0]).unwrap();
        let mut merged = a.clone();
        merged.merge(&b);
        let mut streamed = ConfusionMatrix::new(2);
        streamed.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 0]).unwrap();
        assert_eq!(merged, streamed);
    }

    #[test]
    fn report_round_trips_through_serialization() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        let names = vec!["road".to_string(), "car".to_string()];
        let report = MetricReport::from_matrix(&cm, &names).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
        let table = report.render_table();
        assert!(table.contains("road"));
        assert!(table.contains("58.3")); // 7/12 = 58.33%
    }

    #[test]
    fn name_count_mismatch_rejected() {
        let cm = ConfusionMatrix::new(3);
        let names = vec!["a".to_string()];
        assert!(MetricReport::from_matrix(&cm, &names).is_err());
    }
}
