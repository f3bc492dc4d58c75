//! Axis-aligned boxes, IoU and greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Axis-aligned box in the internal 0-based continuous pixel frame.
///
/// Width is `x2 - x1` (no `+1`), so a box `(0,0,10,10)` has area 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Finite coordinates with strictly positive width and height.
    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    /// Scales the box about its center.
    pub fn scaled(&self, factor: f64) -> Self {
        let (cx, cy) = self.center();
        Self::from_center(cx, cy, self.width() * factor, self.height() * factor)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// IoU without validation; degenerate pairs yield 0.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, EvalError> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(EvalError::DegenerateBox(*bx));
        }
    }
    Ok(a.iou(b))
}

/// Greedy NMS: visit boxes by descending score (ties by lower index) and drop
/// any box whose IoU with an already kept box exceeds `iou_thr`.
///
/// Returns kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes/scores length mismatch");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_thr) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        let b = BBox::new(5.0, 5.0, 15.0, 15.0);
        assert!((iou(&a, &b).unwrap() - 25.0 / 175.0).abs() < 1e-15);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert!(iou(&a, &BBox::new(3.0, 3.0, 3.0, 9.0)).is_err());
        assert!(iou(&BBox::new(0.0, 0.0, f64::NAN, 1.0), &a).is_err());
    }

    #[test]
    fn nms_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[a], &[0.3], 0.5), vec![0]);
        assert_eq!(nms(&[a, a], &[0.8, 0.9], 0.5), vec![1]);
        assert!(nms(&[], &[], 0.5).is_empty());
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[a, a, a], &[0.5, 0.5, 0.5], 0.5), vec![0]);
    }

    #[test]
    fn scaled_keeps_center() {
        let b = BBox::new(10.0, 20.0, 30.0, 60.0).scaled(1.5);
        assert_eq!(b.center(), (20.0, 40.0));
        assert_eq!(b.width(), 30.0);
        assert_eq!(b.height(), 60.0);
    }
}
