//! Differentiable RoI warping.
//!
//! A box `(x, y, w, h)` in feature-map coordinates is resampled to a fixed
//! `H′ × W′` grid with the separable bilinear kernel
//! `κ(t) = max(0, 1 − |t|)`: output column `u′ ∈ [−W′/2, W′/2)` samples the
//! feature map at `x + (u′/W′)·w`, and likewise for rows. For a fixed box the
//! warp is a linear map of the features; it is also piecewise linear in the
//! box coordinates, so gradients flow to both.
//!
//! Samples falling outside the feature map contribute zero.

use crate::error::{contract_err, dim_err, Result};
use crate::geometry::BBox;
use crate::tape::{BackwardContext, Operation, Tape, Var};
use crate::tensor::Tensor;

/// Default warp resolution.
pub const DEFAULT_WARP_SIZE: usize = 28;

/// Bilinear interpolation kernel `max(0, 1 − |t|)`.
pub fn kappa(t: f64) -> f64 {
    (1.0 - t.abs()).max(0.0)
}

/// Derivative of [`kappa`]; zero at the kinks `t = 0` and `|t| = 1`.
pub fn kappa_grad(t: f64) -> f64 {
    let a = t.abs();
    if a > 0.0 && a < 1.0 {
        -t.signum()
    } else {
        0.0
    }
}

/// Weight of grid index `u` for target offset `u_prime` of a box centered at
/// `x` with extent `w`, warped to `out_w` cells.
pub fn bilinear_weight(u: f64, u_prime: f64, x: f64, w: f64, out_w: usize) -> f64 {
    kappa(x + u_prime / out_w as f64 * w - u)
}

/// Partial derivatives `(∂/∂x, ∂/∂w)` of [`bilinear_weight`].
pub fn bilinear_weight_grad(u: f64, u_prime: f64, x: f64, w: f64, out_w: usize) -> (f64, f64) {
    let frac = u_prime / out_w as f64;
    let d = kappa_grad(x + frac * w - u);
    (d, d * frac)
}

/// Target offset of output cell `j` along an axis of `n` cells.
pub fn target_offset(j: usize, n: usize) -> f64 {
    j as f64 - (n / 2) as f64
}

/// A box in feature-map coordinates and the warp output resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpSpec {
    pub bbox: BBox,
    pub out_w: usize,
    pub out_h: usize,
}

impl WarpSpec {
    pub fn new(bbox: BBox, out_w: usize, out_h: usize) -> Self {
        Self { bbox, out_w, out_h }
    }

    fn validate(&self) -> Result<()> {
        if self.out_w == 0 || self.out_h == 0 {
            return contract_err("warp resolution must be at least 1x1");
        }
        if !(self.bbox.w > 0.0 && self.bbox.h > 0.0) {
            return contract_err(format!("box extent must be positive, got {:?}", self.bbox));
        }
        if !self.bbox.x.is_finite() || !self.bbox.y.is_finite() {
            return contract_err("box center must be finite");
        }
        Ok(())
    }
}

/// Nonzero taps of one output cell along one axis.
#[derive(Debug, Clone, Copy)]
struct AxisTap {
    /// Grid index and whether it lies inside the feature map.
    cells: [(usize, bool); 2],
    weight: [f64; 2],
    /// `∂weight/∂position`
    slope: [f64; 2],
    /// `∂position/∂extent`, i.e. `u′/W′`
    frac: f64,
}

fn axis_taps(center: f64, extent: f64, out: usize, size: usize) -> Vec<AxisTap> {
    (0..out)
        .map(|j| {
            let frac = target_offset(j, out) / out as f64;
            let p = center + frac * extent;
            let base = p.floor();
            let mut tap = AxisTap {
                cells: [(0, false); 2],
                weight: [0.0; 2],
                slope: [0.0; 2],
                frac,
            };
            for k in 0..2 {
                let u = base + k as f64;
                let t = p - u;
                let inside = u >= 0.0 && u < size as f64;
                tap.cells[k] = (if inside { u as usize } else { 0 }, inside);
                tap.weight[k] = if inside { kappa(t) } else { 0.0 };
                tap.slope[k] = if inside { kappa_grad(t) } else { 0.0 };
            }
            tap
        })
        .collect()
}

fn feature_dims(f: &Tensor) -> Result<(usize, usize, usize)> {
    match *f.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => dim_err(format!("feature map must be [C, H, W], got {:?}", f.shape())),
    }
}

/// Warps one box into `out` (length `C·H′·W′`).
fn warp_into(f: &[f64], (c, h, w): (usize, usize, usize), spec: &WarpSpec, out: &mut [f64]) {
    let tx = axis_taps(spec.bbox.x, spec.bbox.w, spec.out_w, w);
    let ty = axis_taps(spec.bbox.y, spec.bbox.h, spec.out_h, h);
    let mut idx = 0;
    for ch in 0..c {
        let plane = &f[ch * h * w..(ch + 1) * h * w];
        for vy in &ty {
            for ux in &tx {
                let mut acc = 0.0;
                for a in 0..2 {
                    let (v, vin) = vy.cells[a];
                    if !vin || vy.weight[a] == 0.0 {
                        continue;
                    }
                    let row = &plane[v * w..(v + 1) * w];
                    for b in 0..2 {
                        let (u, uin) = ux.cells[b];
                        if uin {
                            acc += vy.weight[a] * ux.weight[b] * row[u];
                        }
                    }
                }
                out[idx] = acc;
                idx += 1;
            }
        }
    }
}

/// Accumulates the feature gradient into `grad_f` and returns the box
/// gradient `(∂x, ∂y, ∂w, ∂h)`.
fn warp_backward_into(
    f: &[f64],
    (c, h, w): (usize, usize, usize),
    spec: &WarpSpec,
    grad_out: &[f64],
    mut grad_f: Option<&mut [f64]>,
    want_box: bool,
) -> [f64; 4] {
    let tx = axis_taps(spec.bbox.x, spec.bbox.w, spec.out_w, w);
    let ty = axis_taps(spec.bbox.y, spec.bbox.h, spec.out_h, h);
    let mut gbox = [0.0; 4];
    let mut idx = 0;
    for ch in 0..c {
        let off = ch * h * w;
        for vy in &ty {
            for ux in &tx {
                let g = grad_out[idx];
                idx += 1;
                if g == 0.0 {
                    continue;
                }
                // ∂out/∂px and ∂out/∂py for this cell
                let (mut dpx, mut dpy) = (0.0, 0.0);
                for a in 0..2 {
                    let (v, vin) = vy.cells[a];
                    if !vin {
                        continue;
                    }
                    for b in 0..2 {
                        let (u, uin) = ux.cells[b];
                        if !uin {
                            continue;
                        }
                        let fv = f[off + v * w + u];
                        if let Some(gf) = grad_f.as_deref_mut() {
                            gf[off + v * w + u] += vy.weight[a] * ux.weight[b] * g;
                        }
                        if want_box {
                            dpx += vy.weight[a] * ux.slope[b] * fv;
                            dpy += vy.slope[a] * ux.weight[b] * fv;
                        }
                    }
                }
                if want_box {
                    gbox[0] += g * dpx;
                    gbox[1] += g * dpy;
                    gbox[2] += g * dpx * ux.frac;
                    gbox[3] += g * dpy * vy.frac;
                }
            }
        }
    }
    gbox
}

/// Warps the box region of `f` (`[C, H, W]`) to `[C, H′, W′]`.
pub fn roi_warp_forward(f: &Tensor, spec: &WarpSpec) -> Result<Tensor> {
    spec.validate()?;
    let dims = feature_dims(f)?;
    let mut out = vec![0.0; dims.0 * spec.out_h * spec.out_w];
    warp_into(f.data(), dims, spec, &mut out);
    Tensor::new(vec![dims.0, spec.out_h, spec.out_w], out)
}

/// Transpose of [`roi_warp_forward`] applied to `grad_out`, plus the gradient
/// with respect to the box `(x, y, w, h)`.
pub fn roi_warp_backward(f: &Tensor, spec: &WarpSpec, grad_out: &Tensor) -> Result<(Tensor, [f64; 4])> {
    spec.validate()?;
    let dims = feature_dims(f)?;
    if grad_out.shape() != [dims.0, spec.out_h, spec.out_w] {
        return dim_err(format!(
            "grad_out {:?} does not match warp output [{}, {}, {}]",
            grad_out.shape(),
            dims.0,
            spec.out_h,
            spec.out_w
        ));
    }
    let mut grad_f = Tensor::zeros(f.shape());
    let gbox = warp_backward_into(
        f.data(),
        dims,
        spec,
        grad_out.data(),
        Some(grad_f.data_mut()),
        true,
    );
    Ok((grad_f, gbox))
}

/// RoI pooling: warp to `warp_size × warp_size`, then max-pool by `pool`.
pub fn roi_pool(f: &Tensor, bbox: BBox, warp_size: usize, pool: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let bv = tape.constant(Tensor::new(vec![1, 4], bbox.to_array().to_vec())?);
    let warped = tape.roi_warp(fv, bv, warp_size, warp_size)?;
    let pooled = tape.max_pool2d(warped, pool)?;
    let c = f.shape()[0];
    let side = warp_size / pool;
    tape.value(pooled).clone().reshaped(&[c, side, side])
}

struct RoiWarp {
    out_h: usize,
    out_w: usize,
}

impl Operation for RoiWarp {
    fn name(&self) -> &'static str {
        "roi_warp"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let f = ctx.inputs[0];
        let boxes = ctx.inputs[1];
        let dims = feature_dims(f)?;
        let per_roi = dims.0 * self.out_h * self.out_w;
        let mut grad_f = ctx.needs_grad[0].then(|| Tensor::zeros(f.shape()));
        let want_box = ctx.needs_grad[1];
        let mut grad_boxes = Vec::with_capacity(boxes.len());
        let g = ctx.grad_output.data();
        for (r, b) in boxes.data().chunks(4).enumerate() {
            let spec = WarpSpec::new(BBox::from_slice(b), self.out_w, self.out_h);
            let gb = warp_backward_into(
                f.data(),
                dims,
                &spec,
                &g[r * per_roi..(r + 1) * per_roi],
                grad_f.as_mut().map(|t| t.data_mut()),
                want_box,
            );
            grad_boxes.extend(gb);
        }
        Ok(vec![
            grad_f,
            want_box.then(|| Tensor::new(boxes.shape().to_vec(), grad_boxes)).transpose()?,
        ])
    }
}

impl Tape {
    /// Warps each row `(x, y, w, h)` of `boxes` (`[R, 4]`, feature-map
    /// coordinates) out of `features` (`[C, H, W]`), giving `[R, C, H′, W′]`.
    pub fn roi_warp(&mut self, features: Var, boxes: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let f = self.value(features);
        let dims = feature_dims(f)?;
        let b = self.value(boxes);
        let rois = match *b.shape() {
            [r, 4] => r,
            _ => return dim_err(format!("boxes must be [R, 4], got {:?}", b.shape())),
        };
        let per_roi = dims.0 * out_h * out_w;
        let mut out = vec![0.0; rois * per_roi];
        for (r, row) in b.data().chunks(4).enumerate() {
            let spec = WarpSpec::new(BBox::from_slice(row), out_w, out_h);
            spec.validate()?;
            warp_into(f.data(), dims, &spec, &mut out[r * per_roi..(r + 1) * per_roi]);
        }
        let value = Tensor::new(vec![rois, dims.0, out_h, out_w], out)?;
        Ok(self.record(value, vec![features, boxes], Box::new(RoiWarp { out_h, out_w })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_examples() {
        assert_eq!(bilinear_weight(8.0, -2.0, 10.0, 4.0, 4), 1.0);
        assert_eq!(bilinear_weight(7.0, -2.0, 10.0, 4.0, 4), 0.0);
        assert_eq!(bilinear_weight(10.0, 0.0, 10.5, 4.0, 4), 0.5);
        assert_eq!(bilinear_weight_grad(10.0, 0.0, 10.5, 4.0, 4), (-1.0, 0.0));
        assert_eq!(bilinear_weight_grad(10.0, 1.0, 10.5, 4.0, 4), (0.0, 0.0));
        let (dx, dw) = bilinear_weight_grad(11.0, 1.0, 10.2, 4.0, 4);
        assert_eq!((dx, dw), (-1.0, -0.25));
    }

    #[test]
    fn kink_derivative_is_zero() {
        for t in [0.0, 1.0, -1.0, 2.0] {
            assert_eq!(kappa_grad(t), 0.0);
        }
        assert_eq!(kappa_grad(0.25), -1.0);
        assert_eq!(kappa_grad(-0.25), 1.0);
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn constant_map_is_preserved_inside() {
        let f = Tensor::full(&[2, 20, 20], 3.5);
        let spec = WarpSpec::new(BBox::new(9.3, 10.1, 7.7, 5.2), 7, 6);
        let out = roi_warp_forward(&f, &spec).unwrap();
        assert!(out.data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
        let (_, gbox) = roi_warp_backward(&f, &spec, &Tensor::ones(out.shape())).unwrap();
        assert!(gbox.iter().all(|g| g.abs() < 1e-12), "{gbox:?}");
    }

    #[test]
    fn integer_aligned_box_is_a_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_map(&mut rng, 2, 16, 16);
        let spec = WarpSpec::new(BBox::new(8.0, 7.0, 6.0, 4.0), 6, 4);
        let out = roi_warp_forward(&f, &spec).unwrap();
        for c in 0..2 {
            for j in 0..4 {
                for i in 0..6 {
                    let expect = f.data()[(c * 16 + 5 + j) * 16 + 5 + i];
                    assert_eq!(out.data()[(c * 4 + j) * 6 + i], expect);
                }
            }
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_map(&mut rng, 3, 10, 12);
        let spec = WarpSpec::new(BBox::new(5.4, 4.6, 3.3, 2.9), 4, 4);
        let (gf, gb) = roi_warp_backward(&f, &spec, &Tensor::zeros(&[3, 4, 4])).unwrap();
        assert_eq!(gf.max_abs(), 0.0);
        assert_eq!(gb, [0.0; 4]);
    }

    #[test]
    fn bad_box_is_a_contract_error() {
        let f = Tensor::zeros(&[1, 4, 4]);
        let spec = WarpSpec::new(BBox::new(2.0, 2.0, 0.0, 1.0), 2, 2);
        assert!(matches!(roi_warp_forward(&f, &spec), Err(crate::Error::Contract(_))));
        let spec = WarpSpec::new(BBox::new(2.0, 2.0, 1.0, 1.0), 2, 2);
        assert!(matches!(
            roi_warp_backward(&f, &spec, &Tensor::zeros(&[1, 3, 2])),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn pooled_shapes() {
        let f = Tensor::full(&[5, 12, 12], 0.25);
        let b = BBox::new(6.0, 6.0, 4.0, 3.0);
        let p2 = roi_pool(&f, b, 28, 2).unwrap();
        assert_eq!(p2.shape(), &[5, 14, 14]);
        let p4 = roi_pool(&f, b, 28, 4).unwrap();
        assert_eq!(p4.shape(), &[5, 7, 7]);
        assert!(p4.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn tape_op_matches_pure_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_map(&mut rng, 2, 9, 11);
        let boxes = [BBox::new(4.3, 3.7, 5.1, 4.4), BBox::new(2.2, 6.6, 3.9, 2.5)];
        let g = Tensor::from_fn(&[2, 2, 5, 6], |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let fv = tape.leaf(f.clone());
        let bv = tape.leaf(Tensor::new(vec![2, 4], boxes.iter().flat_map(|b| b.to_array()).collect()).unwrap());
        let w = tape.roi_warp(fv, bv, 5, 6).unwrap();
        let gv = tape.constant(g.clone());
        let prod = tape.mul(w, gv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let mut gf = Tensor::zeros(f.shape());
        for (r, b) in boxes.iter().enumerate() {
            let spec = WarpSpec::new(*b, 6, 5);
            let out = roi_warp_forward(&f, &spec).unwrap();
            assert_eq!(out.data(), &tape.value(w).data()[r * 60..(r + 1) * 60]);
            let gr = Tensor::new(vec![2, 5, 6], g.data()[r * 60..(r + 1) * 60].to_vec()).unwrap();
            let (gfr, gbr) = roi_warp_backward(&f, &spec, &gr).unwrap();
            gf.add_assign(&gfr).unwrap();
            assert_eq!(&grads.get(bv).unwrap().data()[r * 4..r * 4 + 4], &gbr);
        }
        for (a, b) in gf.data().iter().zip(grads.get(fv).unwrap().data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
