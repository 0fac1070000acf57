//! Boxes and binary masks shared by every stage of the pipeline.
//!
//! Boxes are `(x1, y1, x2, y2)` in continuous pixel coordinates: pixel
//! `(row, col)` covers `[col, col+1) × [row, row+1)` and has its center at
//! `(col + 0.5, row + 0.5)`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

    /// Converts COCO's `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }

    pub fn clip(self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn scale(self, factor: f64) -> Self {
        Self::new(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Largest coordinate difference to `other`.
    pub fn max_abs_diff(&self, other: &BBox) -> f64 {
        (self.x1 - other.x1)
            .abs()
            .max((self.y1 - other.y1).abs())
            .max((self.x2 - other.x2).abs())
            .max((self.y2 - other.y2).abs())
    }

    pub fn lexicographic_key(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Row-major binary mask, `height × width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask(pub Array2<bool>);

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self(Array2::from_elem((height, width), false))
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut((usize, usize)) -> bool) -> Self {
        Self(Array2::from_shape_fn((height, width), f))
    }

    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.0[(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.0[(row, col)] = value;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&v| v)
    }

    /// Tight half-open bounds of the set pixels, or `None` when empty.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for ((r, c), &v) in self.0.indexed_iter() {
            if !v {
                continue;
            }
            bounds = Some(match bounds {
                None => (c, r, c, r),
                Some((x0, y0, x1, y1)) => (x0.min(c), y0.min(r), x1.max(c), y1.max(r)),
            });
        }
        bounds.map(|(x0, y0, x1, y1)| BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
    }

    /// Row-major flat view.
    pub fn to_vec(&self) -> Vec<bool> {
        self.0.iter().copied().collect()
    }
}
