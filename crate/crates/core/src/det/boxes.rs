//! Detection boxes, IoU, and non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scored axis-aligned detection, pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub class: usize,
}

impl DetectionBox {
    pub fn validate(&self) -> Result<()> {
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::Value(format!(
                "degenerate box [{}, {}, {}, {}]",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        if !self.score.is_finite() || !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Value(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Intersection over union; rejects degenerate boxes.
pub fn iou(a: &DetectionBox, b: &DetectionBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.x1 < bx.x2 && bx.y1 < bx.y2) {
            return Err(Error::Value(format!(
                "degenerate box [{}, {}, {}, {}]",
                bx.x1, bx.y1, bx.x2, bx.y2
            )));
        }
    }
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    Ok(inter / (a.area() + b.area() - inter))
}

/// Greedy descending-score suppression. Candidates are visited by
/// (score desc, original index asc); a candidate is dropped when its IoU
/// with any kept box reaches the threshold (closed: exactly-at is dropped).
pub fn nms(boxes: &[DetectionBox], iou_threshold: f64) -> Result<Vec<DetectionBox>> {
    for b in boxes {
        if !b.score.is_finite() {
            return Err(Error::Value(format!("non-finite score {}", b.score)));
        }
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        boxes[j]
            .score
            .partial_cmp(&boxes[i].score)
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut kept: Vec<DetectionBox> = Vec::new();
    'candidates: for &i in &order {
        for k in &kept {
            if iou(&boxes[i], k)? >= iou_threshold {
                continue 'candidates;
            }
        }
        kept.push(boxes[i]);
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> DetectionBox {
        DetectionBox {
            x1,
            y1,
            x2,
            y2,
            score,
            class: 0,
        }
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let a = boxed(1.0, 2.0, 5.0, 6.0, 0.5);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_boxes_have_zero_iou() {
        let a = boxed(0.0, 0.0, 1.0, 1.0, 0.5);
        let b = boxed(5.0, 5.0, 6.0, 6.0, 0.5);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn overlap_example_is_one_third() {
        let a = boxed(0.0, 0.0, 2.0, 2.0, 0.5);
        let b = boxed(1.0, 0.0, 3.0, 2.0, 0.5);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_is_a_value_error() {
        let a = boxed(0.0, 0.0, 2.0, 2.0, 0.5);
        let bad = boxed(3.0, 0.0, 3.0, 2.0, 0.5);
        assert!(matches!(iou(&a, &bad), Err(Error::Value(_))));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn nms_keeps_highest_of_identical_pair() {
        let boxes = [
            boxed(0.0, 0.0, 2.0, 2.0, 0.8),
            boxed(0.0, 0.0, 2.0, 2.0, 0.9),
        ];
        let kept = nms(&boxes, 0.5).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_keeps_disjoint_boxes() {
        let boxes = [
            boxed(0.0, 0.0, 1.0, 1.0, 0.9),
            boxed(5.0, 5.0, 6.0, 6.0, 0.3),
        ];
        assert_eq!(nms(&boxes, 0.5).unwrap().len(), 2);
    }

    #[test]
    fn iou_exactly_at_threshold_is_suppressed() {
        // [0,0,2,2] vs [1,0,3,2]: IoU = 1/3; threshold 1/3 suppresses.
        let boxes = [
            boxed(0.0, 0.0, 2.0, 2.0, 0.9),
            boxed(1.0, 0.0, 3.0, 2.0, 0.8),
        ];
        let kept = nms(&boxes, 1.0 / 3.0).unwrap();
        assert_eq!(kept.len(), 1);
        let kept_open = nms(&boxes, 1.0 / 3.0 + 1e-9).unwrap();
        assert_eq!(kept_open.len(), 2);
    }

    #[test]
    fn nms_ties_break_by_original_index() {
        let boxes = [
            boxed(0.0, 0.0, 2.0, 2.0, 0.7),
            boxed(0.5, 0.0, 2.5, 2.0, 0.7),
        ];
        let kept = nms(&boxes, 0.3).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0], boxes[0]);
    }
}
