use serde::{Deserialize, Serialize};

/// Axis-aligned box parameterized by its center and size, spanning the
/// half-open region `[x − w/2, x + w/2) × [y − h/2, y + h/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x: 0.5 * (x0 + x1),
            y: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - 0.5 * self.w,
            self.y - 0.5 * self.h,
            self.x + 0.5 * self.w,
            self.y + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        iw * ih
    }

    /// Intersection over union of continuous areas.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    /// Clips the corners to `[0, width] × [0, height]`, keeping at least
    /// `min_size` of extent on each axis.
    pub fn clip(&self, width: f64, height: f64, min_size: f64) -> BBox {
        let (x0, y0, x1, y1) = self.corners();
        let (x0, x1) = clip_span(x0, x1, width, min_size);
        let (y0, y1) = clip_span(y0, y1, height, min_size);
        BBox::from_corners(x0, y0, x1, y1)
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> BBox {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

fn clip_span(lo: f64, hi: f64, limit: f64, min_size: f64) -> (f64, f64) {
    let lo = lo.clamp(0.0, limit);
    let hi = hi.clamp(0.0, limit);
    let c = 0.5 * (lo + hi);
    if hi - lo < min_size {
        (c - 0.5 * min_size, c + 0.5 * min_size)
    } else {
        (lo, hi)
    }
}

/// A class-agnostic box with its objectness probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Regression target of a box relative to a reference box.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }
}

/// Upper bound on log-scale deltas before exponentiation, `ln(1000)`.
pub const MAX_LOG_SCALE: f64 = 6.907_755_278_982_137;

pub fn encode_box(anchor: &BBox, target: &BBox) -> BoxDelta {
    BoxDelta {
        tx: (target.x - anchor.x) / anchor.w,
        ty: (target.y - anchor.y) / anchor.h,
        tw: (target.w / anchor.w).ln(),
        th: (target.h / anchor.h).ln(),
    }
}

pub fn decode_box(base: &BBox, delta: &BoxDelta) -> BBox {
    BBox {
        x: base.x + delta.tx * base.w,
        y: base.y + delta.ty * base.h,
        w: base.w * delta.tw.min(MAX_LOG_SCALE).exp(),
        h: base.h * delta.th.min(MAX_LOG_SCALE).exp(),
    }
}
