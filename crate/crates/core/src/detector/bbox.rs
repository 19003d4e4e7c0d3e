use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, origin top-left, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Upper bound on `dw`/`dh` at decode time so `exp` cannot blow up.
const MAX_LOG_SCALE: f64 = 4.135166556742356; // ln(1000/16)

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::InvalidArgument(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
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
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Center-size regression target `(dx, dy, dw, dh)` taking `reference` to `gt`.
pub fn encode(gt: &BBox, reference: &BBox) -> [f64; 4] {
    let (gx, gy) = gt.center();
    let (rx, ry) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    [
        (gx - rx) / rw,
        (gy - ry) / rh,
        (gt.width() / rw).ln(),
        (gt.height() / rh).ln(),
    ]
}

/// Inverse of [`encode`].
pub fn decode(deltas: &[f64; 4], reference: &BBox) -> BBox {
    let (rx, ry) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    let cx = rx + deltas[0] * rw;
    let cy = ry + deltas[1] * rh;
    let w = rw * deltas[2].min(MAX_LOG_SCALE).exp();
    let h = rh * deltas[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; a box is dropped when its IoU with an already kept box exceeds
/// `threshold`. Equal scores keep input order.
pub fn nms(boxes: &[BBox], scores: &[f64], threshold: f64, limit: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= limit {
            break;
        }
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            keep.push(i);
        }
    }
    keep
}
