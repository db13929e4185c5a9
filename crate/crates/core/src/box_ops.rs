//! Differentiable box decoding and clipping on `[R, 4]` tensors of
//! `(x, y, w, h)` rows.

use crate::error::{dim_err, Result};
use crate::geometry::MAX_LOG_SCALE;
use crate::tape::{BackwardContext, Operation, Tape, Var};
use crate::tensor::Tensor;

fn check_rows(t: &Tensor, what: &str) -> Result<usize> {
    match t.shape() {
        [r, 4] => Ok(*r),
        s => dim_err(format!("{what} must be [R, 4], got {s:?}")),
    }
}

struct DecodeBoxes;

impl Operation for DecodeBoxes {
    fn name(&self) -> &'static str {
        "decode_boxes"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let (base, delta) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let (out, g) = (ctx.output.data(), ctx.grad_output.data());
        let mut gb = Tensor::zeros(ctx.inputs[0].shape());
        let mut gd = Tensor::zeros(ctx.inputs[1].shape());
        for r in 0..base.len() / 4 {
            let i = 4 * r;
            let (wa, ha) = (base[i + 2], base[i + 3]);
            let (tx, ty, tw, th) = (delta[i], delta[i + 1], delta[i + 2], delta[i + 3]);
            let (gx, gy, gw, gh) = (g[i], g[i + 1], g[i + 2], g[i + 3]);
            let b = gb.data_mut();
            b[i] = gx;
            b[i + 1] = gy;
            b[i + 2] = gx * tx + gw * out[i + 2] / wa;
            b[i + 3] = gy * ty + gh * out[i + 3] / ha;
            let d = gd.data_mut();
            d[i] = gx * wa;
            d[i + 1] = gy * ha;
            d[i + 2] = if tw < MAX_LOG_SCALE { gw * out[i + 2] } else { 0.0 };
            d[i + 3] = if th < MAX_LOG_SCALE { gh * out[i + 3] } else { 0.0 };
        }
        Ok(vec![
            ctx.needs_grad[0].then_some(gb),
            ctx.needs_grad[1].then_some(gd),
        ])
    }
}

/// Distance outside the image that still counts as inside, absorbing the
/// roundoff of a previous clip.
const CLIP_SLACK: f64 = 1e-9;

/// Per-axis clip of one box: clamped corners, then widened to `min_size`.
/// Returns the clipped center and extent plus the partials of each with
/// respect to the input center and extent.
fn clip_axis(c: f64, e: f64, limit: f64, min_size: f64) -> (f64, f64, [[f64; 2]; 2]) {
    let lo = c - 0.5 * e;
    let hi = c + 0.5 * e;
    if lo >= -CLIP_SLACK && hi <= limit + CLIP_SLACK && e > min_size {
        // already inside: returned bit-exact so that re-clipping is a no-op
        return (c, e, [[1.0, 0.0], [0.0, 1.0]]);
    }
    let lo_c = lo.clamp(0.0, limit);
    let hi_c = hi.clamp(0.0, limit);
    let dlo = if lo > 0.0 && lo < limit { 1.0 } else { 0.0 };
    let dhi = if hi > 0.0 && hi < limit { 1.0 } else { 0.0 };
    // d(lo)/d(c, e) = (1, -1/2), d(hi)/d(c, e) = (1, 1/2)
    let dcenter = [0.5 * (dlo + dhi), 0.25 * (dhi - dlo)];
    let span = hi_c - lo_c;
    let (extent, dextent) = if span > min_size {
        (span, [dhi - dlo, 0.5 * (dhi + dlo)])
    } else {
        (min_size, [0.0, 0.0])
    };
    (0.5 * (lo_c + hi_c), extent, [dcenter, dextent])
}

struct ClipBoxes {
    width: f64,
    height: f64,
    min_size: f64,
}

impl Operation for ClipBoxes {
    fn name(&self) -> &'static str {
        "clip_boxes"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let b = ctx.inputs[0].data();
        let g = ctx.grad_output.data();
        let mut out = Tensor::zeros(ctx.inputs[0].shape());
        let o = out.data_mut();
        for r in 0..b.len() / 4 {
            let i = 4 * r;
            for (axis, limit) in [(0, self.width), (1, self.height)] {
                let (_, _, [dc, de]) = clip_axis(b[i + axis], b[i + 2 + axis], limit, self.min_size);
                let (gc, ge) = (g[i + axis], g[i + 2 + axis]);
                o[i + axis] = gc * dc[0] + ge * de[0];
                o[i + 2 + axis] = gc * dc[1] + ge * de[1];
            }
        }
        Ok(vec![Some(out)])
    }
}

impl Tape {
    /// Applies deltas to base boxes:
    /// `x = xa + tx·wa`, `y = ya + ty·ha`, `w = wa·exp(min(tw, ln 1000))`,
    /// `h = ha·exp(min(th, ln 1000))`. Differentiable in both inputs.
    pub fn decode_boxes(&mut self, base: Var, deltas: Var) -> Result<Var> {
        let (b, d) = (self.value(base), self.value(deltas));
        let rows = check_rows(b, "base boxes")?;
        if check_rows(d, "deltas")? != rows {
            return dim_err(format!("{rows} base boxes but {} deltas", d.shape()[0]));
        }
        let (b, d) = (b.data(), d.data());
        let mut out = Vec::with_capacity(4 * rows);
        for r in 0..rows {
            let i = 4 * r;
            out.push(b[i] + d[i] * b[i + 2]);
            out.push(b[i + 1] + d[i + 1] * b[i + 3]);
            out.push(b[i + 2] * d[i + 2].min(MAX_LOG_SCALE).exp());
            out.push(b[i + 3] * d[i + 3].min(MAX_LOG_SCALE).exp());
        }
        let value = Tensor::new(vec![rows, 4], out)?;
        Ok(self.record(value, vec![base, deltas], Box::new(DecodeBoxes)))
    }

    /// Clips boxes to `[0, width) × [0, height)` and widens each side to at
    /// least `min_size`. The gradient is zero along clamped coordinates.
    pub fn clip_boxes(&mut self, boxes: Var, width: f64, height: f64, min_size: f64) -> Result<Var> {
        let b = self.value(boxes);
        let rows = check_rows(b, "boxes")?;
        let b = b.data();
        let mut out = vec![0.0; 4 * rows];
        for r in 0..rows {
            let i = 4 * r;
            for (axis, limit) in [(0, width), (1, height)] {
                let (c, e, _) = clip_axis(b[i + axis], b[i + 2 + axis], limit, min_size);
                out[i + axis] = c;
                out[i + 2 + axis] = e;
            }
        }
        let value = Tensor::new(vec![rows, 4], out)?;
        Ok(self.record(
            value,
            vec![boxes],
            Box::new(ClipBoxes {
                width,
                height,
                min_size,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{decode_box, BBox, BoxDelta};
    use crate::gradcheck::check_tape_gradients;

    #[test]
    fn decode_matches_scalar_decode() {
        let base = [BBox::new(10.0, 12.0, 8.0, 4.0), BBox::new(40.0, 30.0, 16.0, 32.0)];
        let deltas = [BoxDelta::from_slice(&[0.1, -0.2, 0.3, -0.4]), BoxDelta::from_slice(&[0.0, 0.0, 9.0, 0.5])];
        let mut t = Tape::new();
        let bv = t.constant(Tensor::new(vec![2, 4], base.iter().flat_map(|b| b.to_array()).collect()).unwrap());
        let dv = t.constant(Tensor::new(vec![2, 4], deltas.iter().flat_map(|d| d.to_array()).collect()).unwrap());
        let out = t.decode_boxes(bv, dv).unwrap();
        for r in 0..2 {
            let want = decode_box(&base[r], &deltas[r]).to_array();
            for k in 0..4 {
                assert!((t.value(out).data()[4 * r + k] - want[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clip_cases() {
        let mut t = Tape::new();
        let b = t.constant(
            Tensor::new(
                vec![3, 4],
                vec![
                    50.0, 50.0, 20.0, 10.0, // interior
                    -5.0, 90.0, 20.0, 20.0, // crosses left and bottom
                    200.0, 50.0, 10.0, 10.0, // fully outside
                ],
            )
            .unwrap(),
        );
        let c = t.clip_boxes(b, 96.0, 96.0, 1.0).unwrap();
        let v = t.value(c).data();
        assert_eq!(&v[0..4], &[50.0, 50.0, 20.0, 10.0]);
        assert_eq!(&v[4..8], &[2.5, 88.0, 5.0, 16.0]);
        assert_eq!(&v[8..12], &[96.0, 50.0, 1.0, 10.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let base = Tensor::new(vec![2, 4], vec![20.0, 30.0, 8.0, 12.0, 5.0, 60.0, 30.0, 16.0]).unwrap();
        let deltas = Tensor::new(vec![2, 4], vec![0.3, -0.2, 0.4, -0.1, -0.25, 0.1, 0.2, 0.3]).unwrap();
        let check = check_tape_gradients(
            |t, v| {
                let d = t.decode_boxes(v[0], v[1])?;
                let c = t.clip_boxes(d, 64.0, 64.0, 1.0)?;
                let w = t.constant(Tensor::from_fn(&[2, 4], |i| 0.3 + 0.1 * i as f64));
                let p = t.mul(c, w)?;
                Ok(t.sum(p))
            },
            &[base, deltas],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(check.max_relative_error < 1e-6, "{check:?}");
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 4]));
        let b = t.constant(Tensor::zeros(&[3, 4]));
        let c = t.constant(Tensor::zeros(&[2, 3]));
        assert!(t.decode_boxes(a, b).is_err());
        assert!(t.clip_boxes(c, 1.0, 1.0, 1.0).is_err());
    }
}
