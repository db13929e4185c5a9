//! Finite-difference verification of analytic gradients.
//!
//! Central differences `(f(x + h) − f(x − h)) / 2h` are computed
//! independently of the tape and compared element by element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cascade::{forward_loss, CascadeConfig, ConvSpec, Model, RoutingPlan};
use crate::error::Result;
use crate::geometry::BBox;
use crate::params::ParameterStore;
use crate::roi_warp::{roi_warp_backward, roi_warp_forward, WarpSpec};
use crate::synth::{generate_scene, DatasetSpec, Scene};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|a − b| / max(|a|, |b|, floor)`
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Outcome of one gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_relative_error: self.max_relative_error.max(other.max_relative_error),
            checked: self.checked + other.checked,
        }
    }

    fn observe(&mut self, err: f64) {
        self.max_relative_error = self.max_relative_error.max(err);
        self.checked += 1;
    }
}

/// Checks tape gradients of the scalar built by `build` with respect to every
/// element of every input.
pub fn check_tape_gradients(
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut report = GradCheck::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("leaf gradient").clone();
        let numeric = numeric_gradient(
            |x| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.leaf(if j == k { x.clone() } else { v.clone() }))
                    .collect();
                let l = build(&mut t, &vs).expect("rebuild");
                t.value(l).item()
            },
            input,
            h,
        );
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            report.observe(relative_error(*a, *n, floor));
        }
    }
    Ok(report)
}

/// Random warp configuration whose sample positions all sit at least 0.3
/// from an integer: integer sample spacing and a center with fractional part
/// in `[0.3, 0.7]`.
pub fn kink_free_warp_case(rng: &mut impl Rng) -> (Tensor, WarpSpec) {
    const SIZES: [usize; 5] = [4, 7, 8, 14, 28];
    let c = rng.random_range(1..=3);
    let h = rng.random_range(12..=40);
    let w = rng.random_range(12..=40);
    let out_w = SIZES[rng.random_range(0..SIZES.len())];
    let out_h = SIZES[rng.random_range(0..SIZES.len())];
    let sx = rng.random_range(1..=2) as f64;
    let sy = rng.random_range(1..=2) as f64;
    let x = rng.random_range(0..w) as f64 + rng.random_range(0.3..=0.7);
    let y = rng.random_range(0..h) as f64 + rng.random_range(0.3..=0.7);
    let f = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
    let spec = WarpSpec::new(BBox::new(x, y, sx * out_w as f64, sy * out_h as f64), out_w, out_h);
    (f, spec)
}

/// Maximum relative errors of the warp's box and feature gradients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WarpGradReport {
    pub box_grad: GradCheck,
    pub feature_grad: GradCheck,
}

/// Compares the analytic warp gradients of `⟨warp(F), g⟩` against central
/// differences on `trials` random kink-free configurations. Feature
/// gradients are probed at `feature_probes` random entries per trial.
pub fn roi_warp_suite(trials: usize, feature_probes: usize, seed: u64) -> Result<WarpGradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = WarpGradReport::default();
    const BOX_STEP: f64 = 1e-4;
    const FEATURE_STEP: f64 = 1e-3;
    for _ in 0..trials {
        let (f, spec) = kink_free_warp_case(&mut rng);
        let g = Tensor::from_fn(&[f.shape()[0], spec.out_h, spec.out_w], |_| {
            rng.random_range(-1.0..1.0)
        });
        let objective = |f: &Tensor, s: &WarpSpec| roi_warp_forward(f, s).and_then(|o| o.dot(&g));
        let (grad_f, grad_box) = roi_warp_backward(&f, &spec, &g)?;

        let coords = spec.bbox.to_array();
        for k in 0..4 {
            let mut plus = coords;
            let mut minus = coords;
            plus[k] += BOX_STEP;
            minus[k] -= BOX_STEP;
            let sp = WarpSpec { bbox: BBox::from_slice(&plus), ..spec };
            let sm = WarpSpec { bbox: BBox::from_slice(&minus), ..spec };
            let numeric = (objective(&f, &sp)? - objective(&f, &sm)?) / (2.0 * BOX_STEP);
            report.box_grad.observe(relative_error(grad_box[k], numeric, 1e-8));
        }

        for _ in 0..feature_probes {
            let i = rng.random_range(0..f.len());
            let mut fp = f.clone();
            fp.data_mut()[i] += FEATURE_STEP;
            let mut fm = f.clone();
            fm.data_mut()[i] -= FEATURE_STEP;
            let numeric = (objective(&fp, &spec)? - objective(&fm, &spec)?) / (2.0 * FEATURE_STEP);
            report.feature_grad.observe(relative_error(grad_f.data()[i], numeric, 1e-8));
        }
    }
    Ok(report)
}

/// Gradient check of the masking path: RoI warp and max pooling of a
/// feature map, multiplied by a resized sigmoid mask, reduced against a
/// random weight map. Checks feature, box and mask-logit gradients.
pub fn masking_suite(trials: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::default();
    for _ in 0..trials {
        let (c, h, w) = (2, 10, 10);
        let f = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
        let bx = Tensor::new(
            vec![1, 4],
            vec![
                rng.random_range(3.0..7.0),
                rng.random_range(3.0..7.0),
                rng.random_range(2.0..5.0),
                rng.random_range(2.0..5.0),
            ],
        )?;
        let logits = Tensor::from_fn(&[1, 1, 6, 6], |_| rng.random_range(-2.0..2.0));
        let g = Tensor::from_fn(&[1, c, 4, 4], |_| rng.random_range(-1.0..1.0));
        let build = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let warped = t.roi_warp(v[0], v[1], 8, 8)?;
            let pooled = t.max_pool2d(warped, 2)?;
            let probs = t.sigmoid(v[2]);
            let resized = t.resize_bilinear(probs, 4, 4)?;
            let idx: Vec<usize> = (0..c).flat_map(|_| 0..16).collect();
            let tiled = t.index_select(resized, idx, &[1, c, 4, 4])?;
            let masked = t.mul(pooled, tiled)?;
            let gv = t.constant(g.clone());
            let prod = t.mul(masked, gv)?;
            Ok(t.sum(prod))
        };
        report = report.merge(check_tape_gradients(build, &[f, bx, logits], 1e-6, 1e-6)?);
    }
    Ok(report)
}

/// Gradient check of the three fused losses.
pub fn loss_suite(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::from_fn(&[6, 5], |_| rng.random_range(-3.0..3.0));
    let targets: Vec<f64> = (0..30).map(|_| rng.random_range(0..2) as f64).collect();
    let weights: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
    let row_w: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..1.0)).collect();
    // keep residuals away from the smooth-L1 kinks at ±1
    let reg_targets: Vec<f64> = logits
        .data()
        .iter()
        .map(|&v| v + [0.4, -0.6, 1.7, -2.3][rng.random_range(0..4)])
        .collect();
    let build = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let a = t.bce_with_logits(v[0], targets.clone(), weights.clone())?;
        let b = t.softmax_cross_entropy(v[0], labels.clone(), row_w.clone())?;
        let c = t.smooth_l1(v[0], reg_targets.clone(), weights.clone())?;
        t.add(&[a, b, c])
    };
    check_tape_gradients(build, &[logits], 1e-6, 1e-6)
}

/// Cascade small enough to difference every parameter: one 3×3 conv to 8
/// channels at stride 1 (8×24×24 features), 2 categories, m = 8, five
/// training stages.
pub fn tiny_cascade_config() -> CascadeConfig {
    CascadeConfig {
        num_categories: 2,
        backbone: vec![ConvSpec::new(8, 3, 1)],
        rpn_channels: 8,
        anchor_scales: vec![8.0, 12.0],
        anchor_ratios: vec![1.0],
        mask_resolution: 8,
        warp_size: 8,
        stage2_pool: 2,
        stage3_pool: 4,
        mask_hidden: 16,
        stage3_hidden: 8,
        proposal_count: 20,
        anchors_per_image: 32,
        rois_per_image: 8,
        train_stages: 5,
        ..CascadeConfig::default()
    }
}

/// A 24×24 scene for [`tiny_cascade_config`].
pub fn tiny_cascade_scene(seed: u64) -> Result<Scene> {
    let spec = DatasetSpec {
        num_scenes: 1,
        width: 24,
        height: 24,
        min_instances: 2,
        max_instances: 2,
        min_size: 7.0,
        max_size: 12.0,
        min_visible_pixels: 12,
        seed,
        ..DatasetSpec::default()
    };
    generate_scene(&spec, 0)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EndToEndReport {
    /// Per parameter tensor, in name order.
    pub params: Vec<(String, GradCheck)>,
    pub overall: GradCheck,
}

/// Differences the total training loss of the tiny cascade with respect to
/// every scalar of every parameter, with the routing frozen after the first
/// forward pass, and compares against the tape gradient.
pub fn end_to_end_suite(seed: u64, h: f64, floor: f64) -> Result<EndToEndReport> {
    let scene = tiny_cascade_scene(seed)?;
    let mut model = Model::new(tiny_cascade_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = RoutingPlan::default();
    let fwd = forward_loss(&model, &scene, &mut plan, &mut rng)?;
    let grads = fwd.tape.backward(fwd.total)?;
    model.params.zero_grad();
    model.params.accumulate(&fwd.tape, &grads)?;
    let analytic: ParameterStore = model.params.clone();

    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut report = EndToEndReport::default();
    for name in names {
        let mut check = GradCheck::default();
        let n = model.params.get(&name).map_or(0, Tensor::len);
        for i in 0..n {
            let orig = model.params.get(&name).expect("parameter").data()[i];
            let mut eval = |v: f64, model: &mut Model| -> Result<f64> {
                model.params.get_mut(&name).expect("parameter").data_mut()[i] = v;
                Ok(forward_loss(model, &scene, &mut plan, &mut rng)?.report.total)
            };
            let fp = eval(orig + h, &mut model)?;
            let fm = eval(orig - h, &mut model)?;
            eval(orig, &mut model)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.grad(&name).map_or(0.0, |g| g.data()[i]);
            check.observe(relative_error(a, numeric, floor));
        }
        report.overall = report.overall.merge(check);
        report.params.push((name, check));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_quadratic() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let g = numeric_gradient(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        for (a, b) in g.data().iter().zip([2.0, -4.0, 1.0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn small_suites_pass() {
        let w = roi_warp_suite(10, 5, 1).unwrap();
        assert!(w.box_grad.max_relative_error <= 1e-4, "{w:?}");
        assert!(w.feature_grad.max_relative_error <= 1e-6, "{w:?}");
        let m = masking_suite(3, 2).unwrap();
        assert!(m.max_relative_error <= 1e-5, "{m:?}");
        let l = loss_suite(3).unwrap();
        assert!(l.max_relative_error <= 1e-6, "{l:?}");
    }
}
