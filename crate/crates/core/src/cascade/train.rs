//! The unified training objective and one SGD step on it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::CascadeConfig;
use super::model::{backbone, check_image, classify_head, mask_head, rpn, select_class_deltas, warp_rois, ClassifyOut, Model, Net};
use super::sampling::{assign_anchors, assign_classes, assign_masks, sample_rois, AnchorTargets, ClassTargets, MaskTargets};
use crate::error::Result;
use crate::geometry::{nms_top, BBox};
use crate::ops::sigmoid;
use crate::params::Sgd;
use crate::synth::{GtInstance, Scene};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Every discrete decision of a training forward pass. Empty fields are
/// filled on first use; filled ones are replayed, which freezes the routing
/// so that the loss becomes a smooth function of the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingPlan {
    pub anchors: Option<AnchorTargets>,
    /// Proposal indices surviving NMS, in rank order.
    pub routed: Option<Vec<usize>>,
    /// Sampled RoIs as indices into the routed proposals followed by the
    /// ground-truth boxes.
    pub rois: Option<Vec<usize>>,
    pub stage2: Option<MaskTargets>,
    pub stage3: Option<ClassTargets>,
    /// Category whose regressor moves each RoI into its stage-4 box.
    pub regress_classes: Option<Vec<usize>>,
    pub stage4: Option<MaskTargets>,
    pub stage5: Option<ClassTargets>,
}

/// Loss values of one forward pass. With five stages `l2` and `l3` include
/// the stage-4 and stage-5 terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

/// Stage outputs kept on the tape for inspection.
pub struct StageVars {
    pub boxes: Var,
    pub mask_logits: Var,
    pub mask_cls: Var,
    pub box_cls: Var,
    pub reg: Var,
    pub masked: Var,
    pub l2: Var,
    pub l3: Var,
}

/// A recorded training forward pass.
pub struct TrainForward {
    pub tape: Tape,
    pub l1: Var,
    pub l2: Var,
    pub l3: Var,
    pub total: Var,
    pub stage3: StageVars,
    pub stage5: Option<StageVars>,
    pub report: LossReport,
}

pub(crate) fn boxes_tensor(boxes: &[BBox]) -> Tensor {
    Tensor::new(vec![boxes.len(), 4], boxes.iter().flat_map(|b| b.to_array()).collect()).expect("rows of 4")
}

pub(crate) fn tensor_boxes(t: &Tensor) -> Vec<BBox> {
    t.data().chunks(4).map(BBox::from_slice).collect()
}

/// Indices of the `count` best boxes surviving NMS at `threshold`.
pub fn route_proposals(boxes: &[BBox], scores: &[f64], threshold: f64, count: usize) -> Vec<usize> {
    nms_top(boxes, scores, threshold, count)
}

/// Highest-scoring non-background class per row of `[R, N+1]` logits.
pub(crate) fn best_foreground(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 1;
            for c in 2..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Same value as `x`, with the gradient flowing back through it multiplied
/// by `factor`.
fn scale_gradient(t: &mut Tape, x: Var, factor: f64) -> Result<Var> {
    if factor == 1.0 {
        return Ok(x);
    }
    let rest = t.value(x).scale(1.0 - factor);
    if factor == 0.0 {
        return Ok(t.constant(rest));
    }
    let scaled = t.scale(x, factor);
    let rest = t.constant(rest);
    t.add(&[scaled, rest])
}

struct StageCtx<'a> {
    net: &'a Net,
    cfg: &'a CascadeConfig,
    features: Var,
    scene: &'a Scene,
}

/// Mask regression then categorization on one set of boxes, with the
/// matching L2 and L3 terms.
fn mask_and_classify(
    t: &mut Tape,
    ctx: &StageCtx<'_>,
    boxes: Var,
    mask_plan: &mut Option<MaskTargets>,
    class_plan: &mut Option<ClassTargets>,
) -> Result<StageVars> {
    let cfg = ctx.cfg;
    let gts: &[GtInstance] = &ctx.scene.instances;
    let list = tensor_boxes(t.value(boxes));
    let warped = warp_rois(t, cfg, ctx.features, boxes)?;
    let mask_logits = mask_head(t, ctx.net, cfg, warped)?;
    let mt = mask_plan.get_or_insert_with(|| assign_masks(&list, gts, cfg, !ctx.scene.boxes_only));
    let l2 = t.bce_with_logits(mask_logits, mt.targets.clone(), mt.weights.clone())?;

    let ClassifyOut {
        mask_cls,
        box_cls,
        reg,
        masked,
    } = classify_head(t, ctx.net, cfg, warped, mask_logits)?;
    let ct = class_plan.get_or_insert_with(|| {
        let probs: Vec<f64> = t.value(mask_logits).data().iter().map(|&z| sigmoid(z)).collect();
        assign_classes(&list, &probs, gts, cfg, (ctx.scene.width(), ctx.scene.height()))
    });
    let ce_mask = t.softmax_cross_entropy(mask_cls, ct.mask_labels.clone(), ct.row_weights.clone())?;
    let ce_box = t.softmax_cross_entropy(box_cls, ct.box_labels.clone(), ct.row_weights.clone())?;
    let reg_loss = t.smooth_l1(reg, ct.reg_targets.clone(), ct.reg_weights.clone())?;
    let l3 = t.add(&[ce_mask, ce_box, reg_loss])?;
    Ok(StageVars {
        boxes,
        mask_logits,
        mask_cls,
        box_cls,
        reg,
        masked,
        l2,
        l3,
    })
}

/// Records the full training objective L1 + L2 + L3 for one scene
/// (stages 1 to 3, or 1 to 5 when `train_stages` is 5). Decisions missing
/// from `plan` are made with `rng` and stored.
pub fn forward_loss(model: &Model, scene: &Scene, plan: &mut RoutingPlan, rng: &mut impl Rng) -> Result<TrainForward> {
    let cfg = &model.config;
    check_image(cfg, &scene.image)?;
    let (width, height) = (scene.width() as f64, scene.height() as f64);
    let gts = &scene.instances;

    let mut t = Tape::new();
    let net = model.bind(&mut t, true)?;
    let image = t.constant(scene.image.clone());
    let features = backbone(&mut t, &net, cfg, image)?;
    let (fh, fw) = {
        let s = t.value(features).shape();
        (s[1], s[2])
    };
    let anchors = model.anchors(fh, fw);
    let out = rpn(&mut t, &net, features)?;

    let at = plan.anchors.get_or_insert_with(|| assign_anchors(&anchors, gts, cfg, rng));
    let l1_cls = t.bce_with_logits(out.logits, at.labels.clone(), at.cls_weights.clone())?;
    let l1_reg = t.smooth_l1(out.deltas, at.reg_targets.clone(), at.reg_weights.clone())?;
    let l1 = t.add(&[l1_cls, l1_reg])?;

    let anchor_var = t.constant(boxes_tensor(&anchors));
    let decoded = t.decode_boxes(anchor_var, out.deltas)?;
    let proposals = t.clip_boxes(decoded, width, height, cfg.min_box_size)?;
    let proposals = scale_gradient(&mut t, proposals, cfg.proposal_box_grad)?;
    let routed = plan
        .routed
        .get_or_insert_with(|| {
            let boxes = tensor_boxes(t.value(proposals));
            route_proposals(&boxes, t.value(out.logits).data(), cfg.nms_train, cfg.proposal_count)
        })
        .clone();
    let routed_boxes = t.select_rows(proposals, &routed)?;
    let candidates = if cfg.append_gt_boxes && !gts.is_empty() {
        let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        let gt_var = t.constant(boxes_tensor(&gt_boxes));
        t.concat(&[routed_boxes, gt_var], 0)?
    } else {
        routed_boxes
    };
    let rois = plan
        .rois
        .get_or_insert_with(|| sample_rois(&tensor_boxes(t.value(candidates)), gts, cfg, rng))
        .clone();
    let roi_boxes = t.select_rows(candidates, &rois)?;

    let ctx = StageCtx {
        net: &net,
        cfg,
        features,
        scene,
    };
    let stage3 = mask_and_classify(&mut t, &ctx, roi_boxes, &mut plan.stage2, &mut plan.stage3)?;
    let (l2, l3, stage5) = if cfg.train_stages == 5 {
        let classes = plan
            .regress_classes
            .get_or_insert_with(|| best_foreground(t.value(stage3.mask_cls)))
            .clone();
        let deltas = select_class_deltas(&mut t, stage3.reg, &classes)?;
        let moved = t.decode_boxes(roi_boxes, deltas)?;
        let regressed = t.clip_boxes(moved, width, height, cfg.min_box_size)?;
        let stage5 = mask_and_classify(&mut t, &ctx, regressed, &mut plan.stage4, &mut plan.stage5)?;
        let l2 = t.add(&[stage3.l2, stage5.l2])?;
        let l3 = t.add(&[stage3.l3, stage5.l3])?;
        (l2, l3, Some(stage5))
    } else {
        (stage3.l2, stage3.l3, None)
    };
    let total = t.add(&[l1, l2, l3])?;
    let report = LossReport {
        l1: t.value(l1).item(),
        l2: t.value(l2).item(),
        l3: t.value(l3).item(),
        total: t.value(total).item(),
    };
    Ok(TrainForward {
        tape: t,
        l1,
        l2,
        l3,
        total,
        stage3,
        stage5,
        report,
    })
}

/// One SGD step on the unified loss of `scene`.
pub fn train_step(model: &mut Model, optimizer: &mut Sgd, scene: &Scene, lr: f64, rng: &mut impl Rng) -> Result<LossReport> {
    let mut plan = RoutingPlan::default();
    let fwd = forward_loss(model, scene, &mut plan, rng)?;
    let grads = fwd.tape.backward(fwd.total)?;
    model.params.zero_grad();
    model.params.accumulate(&fwd.tape, &grads)?;
    if model.config.weight_decay > 0.0 {
        model.params.add_weight_decay(model.config.weight_decay);
    }
    if model.config.max_grad_norm > 0.0 {
        model.params.clip_grad_norm(model.config.max_grad_norm);
    }
    optimizer.step(&mut model.params, lr)?;
    Ok(fwd.report)
}

/// Seeded training loop state: visits scenes in a fresh permutation every
/// epoch and follows the configured learning-rate schedule.
pub struct Trainer {
    pub model: Model,
    optimizer: Sgd,
    seed: u64,
    iteration: usize,
    order: Vec<usize>,
}

impl Trainer {
    pub fn new(model: Model, seed: u64) -> Self {
        let optimizer = Sgd::new(model.config.momentum);
        Self {
            model,
            optimizer,
            seed,
            iteration: 0,
            order: Vec::new(),
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn learning_rate(&self) -> f64 {
        self.model.config.schedule.lr_at(self.iteration)
    }

    fn stream(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Index of the scene used at the current iteration.
    pub fn next_scene(&mut self, num_scenes: usize) -> usize {
        let pos = self.iteration % num_scenes;
        if pos == 0 || self.order.len() != num_scenes {
            let epoch = (self.iteration / num_scenes) as u64;
            let mut rng = self.stream(epoch << 32 | 1);
            self.order = (0..num_scenes).collect();
            self.order.shuffle(&mut rng);
        }
        self.order[pos]
    }

    /// Trains on `scene` for one iteration.
    pub fn step(&mut self, scene: &Scene) -> Result<LossReport> {
        let lr = self.learning_rate();
        let mut rng = self.stream((self.iteration as u64) << 1);
        let report = train_step(&mut self.model, &mut self.optimizer, scene, lr, &mut rng)?;
        self.iteration += 1;
        Ok(report)
    }

    /// Runs `iters` iterations over `scenes`, calling `on_step` with the
    /// iteration index, its loss report and learning rate.
    pub fn run(
        &mut self,
        scenes: &[Scene],
        iters: usize,
        mut on_step: impl FnMut(usize, &LossReport, f64) -> Result<()>,
    ) -> Result<()> {
        if scenes.is_empty() {
            return Err(crate::error::Error::Input("no training scenes".into()));
        }
        for _ in 0..iters {
            let idx = self.next_scene(scenes.len());
            let lr = self.learning_rate();
            let it = self.iteration;
            let report = self.step(&scenes[idx])?;
            on_step(it, &report, lr)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::ConvSpec;
    use crate::synth::{generate_scene, DatasetSpec};

    fn tiny_config(stages: usize) -> CascadeConfig {
        CascadeConfig {
            backbone: vec![ConvSpec::new(4, 3, 2), ConvSpec::new(8, 3, 2)],
            rpn_channels: 8,
            anchor_scales: vec![12.0, 20.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            mask_resolution: 8,
            warp_size: 8,
            mask_hidden: 32,
            stage3_hidden: 16,
            proposal_count: 40,
            anchors_per_image: 64,
            rois_per_image: 16,
            train_stages: stages,
            ..CascadeConfig::default()
        }
    }

    fn tiny_scene(index: usize) -> Scene {
        let spec = DatasetSpec {
            width: 40,
            height: 40,
            min_size: 10.0,
            max_size: 20.0,
            min_visible_pixels: 16,
            max_instances: 2,
            seed: 7,
            ..DatasetSpec::default()
        };
        generate_scene(&spec, index).unwrap()
    }

    #[test]
    fn forward_is_deterministic_and_replayable() {
        let model = Model::new(tiny_config(5), 1).unwrap();
        let scene = tiny_scene(0);
        let mut plan = RoutingPlan::default();
        let a = forward_loss(&model, &scene, &mut plan, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut plan2 = RoutingPlan::default();
        let b = forward_loss(&model, &scene, &mut plan2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(plan, plan2);
        assert!(plan.stage5.is_some());
        // a filled plan ignores the rng
        let c = forward_loss(&model, &scene, &mut plan, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a.report, c.report);
        let r = a.report;
        assert!(r.l1.is_finite() && r.l2.is_finite() && r.l3.is_finite());
        assert!((r.total - (r.l1 + r.l2 + r.l3)).abs() < 1e-12);
    }

    #[test]
    fn three_stage_omits_the_later_stages() {
        let model = Model::new(tiny_config(3), 1).unwrap();
        let mut plan = RoutingPlan::default();
        let f = forward_loss(&model, &tiny_scene(1), &mut plan, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(f.stage5.is_none());
        assert!(plan.stage4.is_none() && plan.regress_classes.is_none());
    }

    #[test]
    fn class_probabilities_sum_to_one() {
        let model = Model::new(tiny_config(5), 2).unwrap();
        let mut plan = RoutingPlan::default();
        let mut f = forward_loss(&model, &tiny_scene(2), &mut plan, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for logits in [f.stage3.mask_cls, f.stage3.box_cls] {
            let p = f.tape.softmax(logits).unwrap();
            let v = f.tape.value(p);
            for row in v.data().chunks(v.shape()[1]) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let model = Model::new(tiny_config(5), 4).unwrap();
        let scene = tiny_scene(3);
        let mut plan = RoutingPlan::default();
        let f = forward_loss(&model, &scene, &mut plan, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let total = f.tape.backward(f.total).unwrap();
        let parts: Vec<_> = [f.l1, f.l2, f.l3].iter().map(|&v| f.tape.backward(v).unwrap()).collect();
        for (var, _) in f.tape.params() {
            let g = total.get(*var).unwrap();
            for i in 0..g.len() {
                let s: f64 = parts.iter().map(|p| p.get(*var).map_or(0.0, |t| t.data()[i])).sum();
                assert!((g.data()[i] - s).abs() <= 1e-10 * (1.0 + s.abs()));
            }
        }
    }

    #[test]
    fn proposal_box_grad_only_scales_the_routed_path() {
        let scene = tiny_scene(4);
        let grads = |factor: f64| {
            let mut cfg = tiny_config(5);
            cfg.proposal_box_grad = factor;
            let model = Model::new(cfg, 6).unwrap();
            let mut plan = RoutingPlan::default();
            let f = forward_loss(&model, &scene, &mut plan, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let g = f.tape.backward(f.total).unwrap();
            let l1 = f.tape.backward(f.l1).unwrap();
            let (var, _) = f.tape.params().iter().find(|(_, n)| n.as_str() == "rpn.bbox.w").unwrap().clone();
            (f.report, g.get(var).unwrap().clone(), l1.get(var).unwrap().clone())
        };
        let (r1, full, l1) = grads(1.0);
        let (r0, cut, _) = grads(0.0);
        let (rh, half, _) = grads(0.5);
        assert_eq!(r1, r0);
        assert!((rh.total - r1.total).abs() < 1e-12);
        assert_eq!(cut, l1);
        assert_ne!(full, l1);
        for i in 0..full.len() {
            let want = 0.5 * (full.data()[i] + l1.data()[i]);
            assert!((half.data()[i] - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut tr = Trainer::new(Model::new(tiny_config(3), 0).unwrap(), 5);
        let mut seen: Vec<usize> = (0..7).map(|_| {
            let i = tr.next_scene(7);
            tr.iteration += 1;
            i
        }).collect();
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let scenes: Vec<Scene> = (0..4).map(tiny_scene).collect();
        let mut cfg = tiny_config(5);
        cfg.schedule = crate::params::LrSchedule {
            phases: vec![crate::params::LrPhase { lr: 0.01, iters: 1000 }],
        };
        let run = |iters: usize| {
            let mut tr = Trainer::new(Model::new(cfg.clone(), 11).unwrap(), 3);
            let mut log = Vec::new();
            tr.run(&scenes, iters, |_, r, _| {
                log.push(r.total);
                Ok(())
            })
            .unwrap();
            (tr.model, log)
        };
        let (m1, log) = run(60);
        let (m2, _) = run(60);
        assert_eq!(m1, m2);
        let first: f64 = log[..12].iter().sum::<f64>() / 12.0;
        let last: f64 = log[48..].iter().sum::<f64>() / 12.0;
        assert!(last < first, "{first} -> {last}");
    }
}
