//! Positive/negative assignment and sampling for the three loss terms.

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::CascadeConfig;
use crate::geometry::{crop_mask, encode_box, render_mask, BBox};
use crate::synth::GtInstance;

/// Highest box IoU against the ground truth and its index, `None` without
/// ground truth. Ties keep the lower index.
pub fn best_match(b: &BBox, gts: &[GtInstance]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        let iou = b.iou(&gt.bbox);
        if best.is_none_or(|(_, v)| iou > v) {
            best = Some((g, iou));
        }
    }
    best
}

/// Stage-1 targets over all anchors; unsampled anchors carry zero weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    /// Objectness target per anchor (1 positive, 0 otherwise).
    pub labels: Vec<f64>,
    /// `1 / sampled` on sampled anchors.
    pub cls_weights: Vec<f64>,
    /// Encoded deltas `[K, 4]` towards the matched box.
    pub reg_targets: Vec<f64>,
    /// `1 / sampled` on the coordinates of sampled positives.
    pub reg_weights: Vec<f64>,
    pub positives: usize,
    pub negatives: usize,
}

/// Labels anchors (positive: IoU ≥ `anchor_positive_iou` with some ground
/// truth, or the best anchor of some ground truth; negative: IoU ≤
/// `anchor_negative_iou`) and samples up to `anchors_per_image` of them, at
/// most `anchor_positive_fraction` positive.
pub fn assign_anchors(
    anchors: &[BBox],
    gts: &[GtInstance],
    cfg: &CascadeConfig,
    rng: &mut impl Rng,
) -> AnchorTargets {
    let k = anchors.len();
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| a.iou(&g.bbox)).collect())
        .collect();
    let mut best_gt = vec![None; k];
    let mut best_iou = vec![0.0; k];
    for (i, row) in ious.iter().enumerate() {
        for (g, &v) in row.iter().enumerate() {
            if best_gt[i].is_none() || v > best_iou[i] {
                best_gt[i] = Some(g);
                best_iou[i] = v;
            }
        }
    }
    let mut positive: Vec<bool> = best_iou.iter().map(|&v| v >= cfg.anchor_positive_iou).collect();
    for g in 0..gts.len() {
        let top = ious.iter().map(|r| r[g]).fold(0.0, f64::max);
        if top <= 0.0 {
            continue;
        }
        for i in 0..k {
            if ious[i][g] == top {
                positive[i] = true;
                // the forced positive regresses towards the box that chose it
                if best_iou[i] < cfg.anchor_positive_iou {
                    best_gt[i] = Some(g);
                }
            }
        }
    }
    let mut pos: Vec<usize> = (0..k).filter(|&i| positive[i]).collect();
    let mut neg: Vec<usize> = (0..k)
        .filter(|&i| !positive[i] && best_iou[i] <= cfg.anchor_negative_iou)
        .collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let max_pos = (cfg.anchor_positive_fraction * cfg.anchors_per_image as f64).floor() as usize;
    pos.truncate(max_pos);
    neg.truncate(cfg.anchors_per_image - pos.len());

    let sampled = (pos.len() + neg.len()).max(1) as f64;
    let mut t = AnchorTargets {
        labels: vec![0.0; k],
        cls_weights: vec![0.0; k],
        reg_targets: vec![0.0; 4 * k],
        reg_weights: vec![0.0; 4 * k],
        positives: pos.len(),
        negatives: neg.len(),
    };
    for &i in &neg {
        t.cls_weights[i] = 1.0 / sampled;
    }
    for &i in &pos {
        t.labels[i] = 1.0;
        t.cls_weights[i] = 1.0 / sampled;
        let g = best_gt[i].expect("positive anchors have a match");
        let d = encode_box(&anchors[i], &gts[g].bbox).to_array();
        t.reg_targets[4 * i..4 * i + 4].copy_from_slice(&d);
        t.reg_weights[4 * i..4 * i + 4].fill(1.0 / sampled);
    }
    t
}

/// Samples training RoIs out of the candidate boxes: up to
/// `roi_foreground_fraction` of `rois_per_image` with box IoU ≥
/// `foreground_iou`, the rest below it. Returns candidate indices,
/// foreground first.
pub fn sample_rois(candidates: &[BBox], gts: &[GtInstance], cfg: &CascadeConfig, rng: &mut impl Rng) -> Vec<usize> {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, b) in candidates.iter().enumerate() {
        match best_match(b, gts) {
            Some((_, iou)) if iou >= cfg.foreground_iou => fg.push(i),
            _ => bg.push(i),
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    let max_fg = (cfg.roi_foreground_fraction * cfg.rois_per_image as f64).round() as usize;
    fg.truncate(max_fg);
    bg.truncate(cfg.rois_per_image - fg.len());
    fg.extend(bg);
    fg
}

/// Stage-2 (and stage-4) mask regression targets for a set of RoIs.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTargets {
    /// `[R, m²]` binary targets (zero on ignored RoIs).
    pub targets: Vec<f64>,
    /// `1 / (positives · m²)` on positive RoIs, zero on ignored ones.
    pub weights: Vec<f64>,
    pub positive: Vec<bool>,
}

/// A RoI is positive when its box IoU with some ground truth exceeds
/// `foreground_iou`; its target is the best-matching instance's mask cropped
/// to the RoI at m×m. With `masks_valid = false` every RoI is ignored.
pub fn assign_masks(rois: &[BBox], gts: &[GtInstance], cfg: &CascadeConfig, masks_valid: bool) -> MaskTargets {
    let m = cfg.mask_resolution;
    let m2 = m * m;
    let matches: Vec<Option<usize>> = rois
        .iter()
        .map(|b| match best_match(b, gts) {
            Some((g, iou)) if masks_valid && iou > cfg.foreground_iou => Some(g),
            _ => None,
        })
        .collect();
    let positives = matches.iter().flatten().count();
    let w = if positives > 0 { 1.0 / (positives * m2) as f64 } else { 0.0 };
    let mut out = MaskTargets {
        targets: vec![0.0; rois.len() * m2],
        weights: vec![0.0; rois.len() * m2],
        positive: matches.iter().map(Option::is_some).collect(),
    };
    for (r, g) in matches.iter().enumerate() {
        if let Some(g) = *g {
            out.targets[r * m2..(r + 1) * m2].copy_from_slice(&crop_mask(&gts[g].mask, &rois[r], m));
            out.weights[r * m2..(r + 1) * m2].fill(w);
        }
    }
    out
}

/// Stage-3 (and stage-5) classification and regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTargets {
    /// Set 1: category when box IoU ≥ `foreground_iou`, else 0.
    pub box_labels: Vec<usize>,
    /// Set 2: as set 1, additionally requiring mask IoU ≥ `mask_iou`.
    pub mask_labels: Vec<usize>,
    /// `1 / R` per RoI.
    pub row_weights: Vec<f64>,
    /// `[R, 4(N+1)]` deltas in the slot of each set-1 positive's category.
    pub reg_targets: Vec<f64>,
    pub reg_weights: Vec<f64>,
}

/// `mask_probs` holds each RoI's m×m predicted probabilities; they are
/// rendered into the image and binarized at `binarize_threshold` for the
/// mask IoU test.
pub fn assign_classes(
    rois: &[BBox],
    mask_probs: &[f64],
    gts: &[GtInstance],
    cfg: &CascadeConfig,
    image_size: (usize, usize),
) -> ClassTargets {
    let r = rois.len();
    let k = cfg.num_categories + 1;
    let m = cfg.mask_resolution;
    let (width, height) = image_size;
    let mut t = ClassTargets {
        box_labels: vec![0; r],
        mask_labels: vec![0; r],
        row_weights: vec![1.0 / r.max(1) as f64; r],
        reg_targets: vec![0.0; r * 4 * k],
        reg_weights: vec![0.0; r * 4 * k],
    };
    for (i, b) in rois.iter().enumerate() {
        let Some((g, iou)) = best_match(b, gts) else { continue };
        if iou < cfg.foreground_iou {
            continue;
        }
        let gt = &gts[g];
        t.box_labels[i] = gt.category;
        let slot = i * 4 * k + 4 * gt.category;
        t.reg_targets[slot..slot + 4].copy_from_slice(&encode_box(b, &gt.bbox).to_array());
        t.reg_weights[slot..slot + 4].fill(1.0 / r as f64);

        let patch = render_mask(&mask_probs[i * m * m..(i + 1) * m * m], m, b, width, height);
        let (area, inter) = patch.overlap(&gt.mask, cfg.binarize_threshold);
        let union = area + gt.mask.area() - inter;
        let mask_iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        if mask_iou >= cfg.mask_iou {
            t.mask_labels[i] = gt.category;
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_anchors, BinaryMask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rect_instance(category: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> GtInstance {
        let mask = BinaryMask::from_fn(96, 96, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1);
        GtInstance::from_mask(category, mask).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn anchor_sampling_respects_budget_and_thresholds() {
        let cfg = CascadeConfig::default();
        let anchors = generate_anchors(12, 12, 8.0, &cfg.anchor_scales, &cfg.anchor_ratios);
        let gts = vec![rect_instance(1, 10, 10, 40, 30), rect_instance(2, 50, 50, 66, 82)];
        let t = assign_anchors(&anchors, &gts, &cfg, &mut rng());
        assert!(t.positives >= 2 && t.positives <= 128);
        assert_eq!(t.positives + t.negatives, 256);
        let total: f64 = t.cls_weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (i, a) in anchors.iter().enumerate() {
            let best = gts.iter().map(|g| a.iou(&g.bbox)).fold(0.0, f64::max);
            if t.labels[i] == 0.0 && t.cls_weights[i] > 0.0 {
                assert!(best <= 0.3);
            }
            if t.labels[i] == 1.0 {
                assert!(t.reg_weights[4 * i] > 0.0);
            }
        }
        // every ground truth has at least one positive anchor
        for g in &gts {
            let top = anchors.iter().map(|a| a.iou(&g.bbox)).fold(0.0, f64::max);
            assert!(anchors
                .iter()
                .enumerate()
                .any(|(i, a)| a.iou(&g.bbox) == top && t.labels[i] == 1.0));
        }
    }

    #[test]
    fn anchors_without_ground_truth_are_all_negative() {
        let cfg = CascadeConfig::default();
        let anchors = generate_anchors(12, 12, 8.0, &cfg.anchor_scales, &cfg.anchor_ratios);
        let t = assign_anchors(&anchors, &[], &cfg, &mut rng());
        assert_eq!(t.positives, 0);
        assert_eq!(t.negatives, 256);
        assert!(t.reg_weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn roi_sampling_fraction() {
        let cfg = CascadeConfig::default();
        let gts = vec![rect_instance(1, 10, 10, 40, 40)];
        let g = gts[0].bbox;
        let mut candidates: Vec<BBox> = (0..40).map(|i| BBox::new(g.x + 0.1 * i as f64, g.y, g.w, g.h)).collect();
        candidates.extend((0..100).map(|i| BBox::new(70.0, 10.0 + 0.5 * i as f64, 10.0, 10.0)));
        let s = sample_rois(&candidates, &gts, &cfg, &mut rng());
        assert_eq!(s.len(), 64);
        assert_eq!(s.iter().filter(|&&i| i < 40).count(), 16);
        let s2 = sample_rois(&candidates, &gts, &cfg, &mut rng());
        assert_eq!(s, s2);
    }

    #[test]
    fn mask_assignment_cases() {
        let cfg = CascadeConfig::default();
        let gts = vec![rect_instance(1, 20, 20, 52, 52)];
        let exact = gts[0].bbox;
        // a horizontal shift of 3w/7 leaves (w - d) / (w + d) = 0.4 IoU
        let shift = BBox::new(exact.x + 3.0 * exact.w / 7.0, exact.y, exact.w, exact.h);
        assert!((shift.iou(&exact) - 0.4).abs() < 1e-12);
        let t = assign_masks(&[exact, shift], &gts, &cfg, true);
        assert_eq!(t.positive, vec![true, false]);
        assert!(t.targets[..784].iter().all(|&v| v == 1.0));
        assert!(t.weights[784..].iter().all(|&w| w == 0.0));
        assert!(t.weights[..784].iter().all(|&w| w == 1.0 / 784.0));
        let t = assign_masks(&[exact], &gts, &cfg, false);
        assert!(!t.positive[0]);
    }

    #[test]
    fn class_assignment_sets() {
        let cfg = CascadeConfig {
            mask_resolution: 8,
            ..CascadeConfig::default()
        };
        let gts = vec![rect_instance(2, 20, 20, 60, 60)];
        let b = gts[0].bbox;
        let full = vec![1.0; 64];
        // left 5/8 of the cells on: mask IoU 0.625 over the same box
        let partial: Vec<f64> = (0..64).map(|i| if i % 8 < 5 { 1.0 } else { 0.0 }).collect();
        // left 2/8 on: mask IoU 0.25
        let poor: Vec<f64> = (0..64).map(|i| if i % 8 < 2 { 1.0 } else { 0.0 }).collect();
        let shifted = BBox::new(b.x + 0.25 * b.w, b.y, b.w, b.h);
        assert!(shifted.iou(&b) >= 0.5 && shifted.iou(&b) < 0.7);
        let far = BBox::new(b.x + 0.8 * b.w, b.y, b.w, b.h);
        assert!(far.iou(&b) < 0.2);
        let rois = [b, b, b, far];
        let probs: Vec<f64> = [full.clone(), partial, poor, full].concat();
        let t = assign_classes(&rois, &probs, &gts, &cfg, (96, 96));
        assert_eq!(t.box_labels, vec![2, 2, 2, 0]);
        assert_eq!(t.mask_labels, vec![2, 2, 0, 0]);
        assert!(t.row_weights.iter().all(|&w| w == 0.25));
        // zero-delta regression target for the exact box, in the category-2 slot
        assert_eq!(&t.reg_targets[8..12], &[0.0; 4]);
        assert_eq!(&t.reg_weights[8..12], &[0.25; 4]);
        assert_eq!(&t.reg_weights[0..8], &[0.0; 8]);
        assert!(t.reg_weights[3 * 12..].iter().all(|&w| w == 0.0));
    }
}
