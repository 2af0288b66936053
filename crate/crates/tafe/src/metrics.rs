//! Segmentation quality metrics accumulated through a confusion matrix.
//!
//! Rows index the ground-truth class, columns the predicted class. Classes
//! that never occur in either truth or prediction (empty union) drop out of
//! the mean scores rather than contributing zeros.

use serde::Serialize;

use crate::error::{Result, TafeError};

/// Square confusion matrix over `classes` labels; rows are ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(TafeError::Config(format!(
                "confusion matrix needs at least 2 classes, got {classes}"
            )));
        }
        Ok(Self {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Adds one pixel with ground-truth label `truth` predicted as `pred`.
    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(TafeError::Data(format!(
                "label pair ({truth},{pred}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    /// Accumulates two equally sized label maps pixel-by-pixel.
    pub fn record_maps(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(TafeError::Shape(format!(
                "label maps differ in length: {} vs {}",
                truth.len(),
                pred.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.record(t as usize, p as usize)?;
        }
        Ok(())
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    fn tp_fp_fn(&self, class: usize) -> (u64, u64, u64) {
        let tp = self.count(class, class);
        let mut fp = 0;
        let mut fn_ = 0;
        for other in 0..self.classes {
            if other != class {
                fp += self.count(other, class);
                fn_ += self.count(class, other);
            }
        }
        (tp, fp, fn_)
    }

    /// Intersection-over-union for one class; `None` when the class appears
    /// in neither truth nor prediction.
    pub fn class_iou(&self, class: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.tp_fp_fn(class);
        let union = tp + fp + fn_;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Dice coefficient for one class; `None` when the union is empty.
    pub fn class_dice(&self, class: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.tp_fp_fn(class);
        let denom = 2 * tp + fp + fn_;
        (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
    }

    fn mean_of(&self, per_class: impl Fn(usize) -> Option<f64>) -> Result<f64> {
        let scores: Vec<f64> = (0..self.classes).filter_map(per_class).collect();
        if scores.is_empty() {
            return Err(TafeError::Data(
                "no class present in either truth or prediction".into(),
            ));
        }
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn mean_iou(&self) -> Result<f64> {
        self.mean_of(|c| self.class_iou(c))
    }

    /// Mean Dice over classes with a non-empty union.
    pub fn mean_dice(&self) -> Result<f64> {
        self.mean_of(|c| self.class_dice(c))
    }

    /// Bundles the scores for serialization; absent classes appear as null.
    pub fn summary(&self) -> Result<MetricsSummary> {
        Ok(MetricsSummary {
            miou: self.mean_iou()?,
            mdice: self.mean_dice()?,
            per_class_iou: (0..self.classes).map(|c| self.class_iou(c)).collect(),
            per_class_dice: (0..self.classes).map(|c| self.class_dice(c)).collect(),
        })
    }
}

/// Serializable snapshot of the scores derived from one confusion matrix.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsSummary {
    pub miou: f64,
    pub mdice: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_dice: Vec<Option<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    /// utility: matrix from truth/pred label slices
    fn from_maps(classes: usize, truth: &[u8], pred: &[u8]) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(classes).unwrap();
        cm.record_maps(truth, pred).unwrap();
        cm
    }

    #[test]
    fn two_class_fixture_matches_hand_counts() {
        // truth [0,0,1,1] vs pred [0,1,1,1]
        let cm = from_maps(2, &[0, 0, 1, 1], &[0, 1, 1, 1]);
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 0), 0);
        assert_eq!(cm.count(1, 1), 2);

        assert!((cm.class_iou(0).unwrap() - 0.5).abs() < 1e-12);
        assert!((cm.class_iou(1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((cm.mean_iou().unwrap() - 7.0 / 12.0).abs() < 1e-12);

        assert!((cm.class_dice(0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((cm.class_dice(1).unwrap() - 0.8).abs() < 1e-12);
        assert!((cm.mean_dice().unwrap() - 11.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn dice_is_two_iou_over_one_plus_iou() {
        let cm = from_maps(
            3,
            &[0, 0, 1, 1, 2, 2, 2, 0, 1, 2],
            &[0, 1, 1, 2, 2, 2, 0, 0, 1, 1],
        );
        for c in 0..3 {
            let iou = cm.class_iou(c).unwrap();
            let dice = cm.class_dice(c).unwrap();
            assert!((dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
        }
    }

    #[test]
    fn absent_class_is_excluded_from_means() {
        // class 2 never appears on either side
        let cm = from_maps(3, &[0, 0, 1], &[0, 1, 1]);
        assert_eq!(cm.class_iou(2), None);
        assert_eq!(cm.class_dice(2), None);
        // means computed over classes 0 and 1 only
        let iou0 = cm.class_iou(0).unwrap();
        let iou1 = cm.class_iou(1).unwrap();
        assert!((cm.mean_iou().unwrap() - (iou0 + iou1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn class_predicted_but_never_true_counts_as_zero_iou() {
        // class 1 only ever predicted: union non-empty, intersection zero
        let cm = from_maps(2, &[0, 0], &[0, 1]);
        assert_eq!(cm.class_iou(1), Some(0.0));
        assert!((cm.mean_iou().unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let cm = from_maps(4, &[0, 1, 2, 3, 2, 1], &[0, 1, 2, 3, 2, 1]);
        assert!((cm.mean_iou().unwrap() - 1.0).abs() < 1e-12);
        assert!((cm.mean_dice().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        assert!(matches!(cm.record(0, 2), Err(TafeError::Data(_))));
        assert!(matches!(cm.record(5, 0), Err(TafeError::Data(_))));
        assert!(matches!(
            cm.record_maps(&[0, 1], &[0]),
            Err(TafeError::Shape(_))
        ));
    }

    #[test]
    fn summary_serializes_absent_classes_as_null() {
        let cm = from_maps(3, &[0, 0, 1], &[0, 1, 1]);
        let s = cm.summary().unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("null"), "{json}");
        assert_eq!(s.per_class_iou.len(), 3);
    }
}
