//! Normalised bounding boxes, IoU and generalised IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use alloc::format;

/// A box in normalised center-size coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Corners {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

impl BoundingBox {
    /// Validated constructor: every coordinate in `[0, 1]`, `w > 0`, `h > 0`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.cx, self.cy, self.w, self.h];
        if coords.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::RejectedInput(format!("box coordinates outside [0,1]: {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::RejectedInput(format!("box has non-positive size: {self:?}")));
        }
        Ok(())
    }

    /// Builds a box from corner coordinates.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// Corner form clipped to the unit square.
    pub fn corners(&self) -> Corners {
        Corners {
            x1: (self.cx - self.w / 2.0).clamp(0.0, 1.0),
            y1: (self.cy - self.h / 2.0).clamp(0.0, 1.0),
            x2: (self.cx + self.w / 2.0).clamp(0.0, 1.0),
            y2: (self.cy + self.h / 2.0).clamp(0.0, 1.0),
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

fn inter_union_hull(a: &BoundingBox, b: &BoundingBox) -> (f64, f64, f64) {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = Corners {
        x1: ca.x1.max(cb.x1),
        y1: ca.y1.max(cb.y1),
        x2: ca.x2.min(cb.x2),
        y2: ca.y2.min(cb.y2),
    }
    .area();
    let union = ca.area() + cb.area() - inter;
    let hull = Corners {
        x1: ca.x1.min(cb.x1),
        y1: ca.y1.min(cb.y1),
        x2: ca.x2.max(cb.x2),
        y2: ca.y2.max(cb.y2),
    }
    .area();
    (inter, union, hull)
}

/// Intersection over union; zero-area unions give 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (inter, union, _) = inter_union_hull(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalised IoU: `IoU - (hull - union) / hull`, in `[-1, 1]`.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (inter, union, hull) = inter_union_hull(a, b);
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::from_corners(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = c(0.1, 0.2, 0.6, 0.9);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&c(0.0, 0.0, 1.0, 1.0), &c(0.5, 0.0, 1.0, 1.0)) - 0.5).abs() < 1e-12);
        assert_eq!(iou(&c(0.0, 0.0, 0.2, 0.2), &c(0.5, 0.5, 0.7, 0.7)), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = c(0.1, 0.2, 0.6, 0.9);
        assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
        assert!(giou(&c(0.0, 0.0, 0.5, 1.0), &c(0.5, 0.0, 1.0, 1.0)).abs() < 1e-9);
        assert!((giou(&c(0.0, 0.0, 0.2, 0.2), &c(0.8, 0.8, 1.0, 1.0)) + 0.92).abs() < 1e-9);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BoundingBox::new(0.5, 0.5, 0.0, 0.2).is_err());
        assert!(BoundingBox::new(0.5, 1.2, 0.1, 0.2).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.5, 0.1, 0.2).is_err());
    }
}
