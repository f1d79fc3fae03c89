//! Axis-aligned boxes and the overlap measure used by association and scoring.

use serde::{Deserialize, Serialize};

/// Axis-aligned box, top-left corner plus extent, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// `w > 0 && h > 0` and all coordinates finite.
    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Multiply every coordinate by the per-axis factors.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x * sx, self.y * sy, self.w * sx, self.h * sy)
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Whether the box overlaps the `width x height` frame rectangle.
    pub fn intersects_frame(&self, width: u32, height: u32) -> bool {
        let frame = BoundingBox::new(0.0, 0.0, width as f64, height as f64);
        self.intersection(&frame) > 0.0
    }

    /// Shift the box so it lies inside the frame. Boxes larger than the frame
    /// are pinned to the top-left corner, which still leaves a non-empty
    /// intersection.
    pub fn clamped_to(&self, width: u32, height: u32) -> Self {
        let (fw, fh) = (width as f64, height as f64);
        let x = if self.w >= fw { 0.0 } else { self.x.clamp(0.0, fw - self.w) };
        let y = if self.h >= fh { 0.0 } else { self.y.clamp(0.0, fh - self.h) };
        Self::new(x, y, self.w, self.h)
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}
