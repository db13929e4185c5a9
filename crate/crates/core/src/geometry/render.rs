//! Conversions between image-space masks and the m×m grid laid over a box.
//!
//! Cell `(i, j)` of an m×m mask covers the box sub-rectangle starting at
//! `(x0 + j·w/m, y0 + i·h/m)`; its value is attached to that cell's center.

use super::{BBox, BinaryMask};

/// Image pixels whose centers fall inside `bbox`, as half-open index ranges
/// clipped to the image.
pub fn pixel_span(bbox: &BBox, width: usize, height: usize) -> ((usize, usize), (usize, usize)) {
    let (x0, y0, x1, y1) = bbox.corners();
    let span = |lo: f64, hi: f64, n: usize| {
        let a = (lo - 0.5).ceil().clamp(0.0, n as f64) as usize;
        let b = (hi - 0.5).ceil().clamp(0.0, n as f64) as usize;
        (a, b.max(a))
    };
    (span(x0, x1, width), span(y0, y1, height))
}

/// Samples a ground-truth mask at the cell centers of an m×m grid over
/// `bbox`, giving the intersection of box and mask at grid resolution.
/// Centers outside the image read as background.
pub fn crop_mask(mask: &BinaryMask, bbox: &BBox, m: usize) -> Vec<f64> {
    let (x0, y0, _, _) = bbox.corners();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        let py = (y0 + (i as f64 + 0.5) * bbox.h / m as f64).floor();
        if py < 0.0 || py >= mask.height() as f64 {
            continue;
        }
        for j in 0..m {
            let px = (x0 + (j as f64 + 0.5) * bbox.w / m as f64).floor();
            if px >= 0.0 && px < mask.width() as f64 && mask.get(px as usize, py as usize) {
                out[i * m + j] = 1.0;
            }
        }
    }
    out
}

/// Probability map of one instance over the image pixels inside its box.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPatch {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    /// Row-major `h × w` probabilities.
    pub probs: Vec<f64>,
}

impl MaskPatch {
    /// Probability at image pixel `(x, y)`, zero outside the patch.
    pub fn get(&self, x: usize, y: usize) -> f64 {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.w || y >= self.y0 + self.h {
            return 0.0;
        }
        self.probs[(y - self.y0) * self.w + (x - self.x0)]
    }

    /// Pixels with probability ≥ `threshold` as a full-image mask.
    pub fn binarize(&self, width: usize, height: usize, threshold: f64) -> BinaryMask {
        let mut mask = BinaryMask::new(width, height);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.probs[y * self.w + x] >= threshold {
                    mask.set(self.x0 + x, self.y0 + y, true);
                }
            }
        }
        mask
    }

    /// Foreground count of the binarized patch and its overlap with `other`.
    pub fn overlap(&self, other: &BinaryMask, threshold: f64) -> (usize, usize) {
        let (mut area, mut inter) = (0, 0);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.probs[y * self.w + x] >= threshold {
                    area += 1;
                    inter += usize::from(other.get(self.x0 + x, self.y0 + y));
                }
            }
        }
        (area, inter)
    }
}

/// Bilinear upsampling of an m×m probability grid into the image pixels
/// covered by `bbox` (edge values clamped), zero elsewhere.
pub fn render_mask(probs: &[f64], m: usize, bbox: &BBox, width: usize, height: usize) -> MaskPatch {
    assert_eq!(probs.len(), m * m, "mask grid must be m×m");
    let ((px0, px1), (py0, py1)) = pixel_span(bbox, width, height);
    let (bx0, by0, _, _) = bbox.corners();
    let tap = |p: usize, origin: f64, extent: f64| {
        let u = ((p as f64 + 0.5 - origin) / extent * m as f64 - 0.5).clamp(0.0, (m - 1) as f64);
        let lo = (u.floor() as usize).min(m - 1);
        let hi = (lo + 1).min(m - 1);
        (lo, hi, u - lo as f64)
    };
    let cols: Vec<_> = (px0..px1).map(|p| tap(p, bx0, bbox.w)).collect();
    let (w, h) = (px1 - px0, py1 - py0);
    let mut out = Vec::with_capacity(w * h);
    for py in py0..py1 {
        let (r0, r1, fy) = tap(py, by0, bbox.h);
        for &(c0, c1, fx) in &cols {
            let top = probs[r0 * m + c0] * (1.0 - fx) + probs[r0 * m + c1] * fx;
            let bottom = probs[r1 * m + c0] * (1.0 - fx) + probs[r1 * m + c1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    MaskPatch {
        x0: px0,
        y0: py0,
        w,
        h,
        probs: out,
    }
}
