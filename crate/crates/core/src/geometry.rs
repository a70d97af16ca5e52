//! Integer pixel boxes and their rasterization onto token grids.
//!
//! All grids use the same membership rule: a cell belongs to a box when the
//! cell's center lies inside the box scaled to grid units, with half-open edges
//! (`lo <= center < hi`).

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Axis-aligned box in integer pixels, serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl From<[u32; 4]> for BBox {
    fn from(v: [u32; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub const fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    /// `x0 < x1` and `y0 < y1`.
    pub fn is_proper(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let b = BBox::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        );
        b.is_proper().then_some(b)
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.intersection(other).is_some()
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other).map_or(0, |b| b.area());
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Re-express a page-space box relative to `origin`'s top-left corner.
    pub fn relative_to(&self, origin: &BBox) -> BBox {
        BBox::new(
            self.x0.saturating_sub(origin.x0),
            self.y0.saturating_sub(origin.y0),
            self.x1.saturating_sub(origin.x0),
            self.y1.saturating_sub(origin.y0),
        )
    }

    pub fn offset(&self, dx: u32, dy: u32) -> BBox {
        BBox::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    /// Scale from a `from` canvas to a `to` canvas, rounding to the nearest pixel.
    pub fn rescale(&self, from: (u32, u32), to: (u32, u32)) -> BBox {
        let sx = to.0 as f64 / from.0 as f64;
        let sy = to.1 as f64 / from.1 as f64;
        let r = |v: u32, s: f64, lim: u32| ((v as f64 * s).round() as u32).min(lim);
        BBox::new(
            r(self.x0, sx, to.0),
            r(self.y0, sy, to.1),
            r(self.x1, sx, to.0),
            r(self.y1, sy, to.1),
        )
    }
}

/// Cells along one axis whose centers fall in `[lo, hi)` once the axis of
/// length `extent` pixels is divided into `cells` cells.
pub fn cell_span(lo: u32, hi: u32, extent: u32, cells: usize) -> Range<usize> {
    let scale = |v: u32| (v as f64 * cells as f64) / extent as f64;
    let first = (scale(lo) - 0.5).ceil().max(0.0) as usize;
    let end = (scale(hi) - 0.5).ceil().max(0.0) as usize;
    first.min(cells)..end.min(cells)
}

/// The cell containing the midpoint of `[lo, hi)`.
pub fn center_cell(lo: u32, hi: u32, extent: u32, cells: usize) -> usize {
    let mid = (lo as f64 + hi as f64) * 0.5 * cells as f64 / extent as f64;
    (mid.floor() as usize).min(cells - 1)
}

/// Row-major membership of each grid cell in `bbox`.
///
/// With `grow_empty`, an axis whose span covers no cell center collapses to the
/// single cell containing the box midpoint, so a box never rasterizes to nothing.
pub fn rasterize_box(
    bbox: &BBox,
    canvas: (u32, u32),
    grid: (usize, usize),
    grow_empty: bool,
) -> Vec<bool> {
    let (rows, cols) = grid;
    let mut xs = cell_span(bbox.x0, bbox.x1, canvas.0, cols);
    let mut ys = cell_span(bbox.y0, bbox.y1, canvas.1, rows);
    if grow_empty {
        if xs.is_empty() {
            let c = center_cell(bbox.x0, bbox.x1, canvas.0, cols);
            xs = c..c + 1;
        }
        if ys.is_empty() {
            let r = center_cell(bbox.y0, bbox.y1, canvas.1, rows);
            ys = r..r + 1;
        }
    }
    let mut out = vec![false; rows * cols];
    for r in ys {
        for c in xs.clone() {
            out[r * cols + c] = true;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serde_as_array() {
        let b = BBox::new(1, 2, 3, 4);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3,4]");
        let back: BBox = serde_json::from_str("[1,2,3,4]").unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn half_open_membership() {
        // 4 cells over 8 px: centers at 1,3,5,7 px.
        assert_eq!(cell_span(0, 4, 8, 4), 0..2);
        assert_eq!(cell_span(1, 3, 8, 4), 0..1);
        assert_eq!(cell_span(3, 5, 8, 4), 1..2);
        assert_eq!(cell_span(2, 3, 8, 4), 1..1);
        assert_eq!(cell_span(0, 8, 8, 4), 0..4);
    }

    #[test]
    fn tiny_box_grows_to_one_cell() {
        let m = rasterize_box(&BBox::new(2, 2, 3, 3), (8, 8), (4, 4), true);
        assert_eq!(m.iter().filter(|&&v| v).count(), 1);
        assert!(m[5]);
        let empty = rasterize_box(&BBox::new(2, 2, 3, 3), (8, 8), (4, 4), false);
        assert!(empty.iter().all(|&v| !v));
    }

    #[test]
    fn iou_basic() {
        let a = BBox::new(0, 0, 10, 10);
        let b = BBox::new(5, 0, 15, 10);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(a.iou(&BBox::new(20, 20, 30, 30)), 0.0);
        assert_eq!(a.iou(&a), 1.0);
    }
}
