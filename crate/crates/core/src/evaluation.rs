//! Mask-level and box-level average precision.
//!
//! Predictions are matched greedily in descending score order (ties keep
//! input order): each takes the unmatched ground truth of its category with
//! the highest IoU and is a true positive if that IoU reaches the threshold.
//! AP is the area under the precision envelope over all recall points.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::inference::Prediction;
use crate::synth::{GtInstance, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchKind {
    /// Mask IoU in image resolution.
    Mask,
    /// Box IoU; predictions use the tight box of their mask when it is
    /// nonempty.
    Box,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    /// One flag per prediction, in the order given.
    pub tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

/// Greedy matching from a precomputed `[pred][gt]` IoU table. Predictions
/// must already be in priority order.
pub fn match_ious(ious: &[Vec<f64>], num_gt: usize, threshold: f64) -> MatchResult {
    let mut gt_matched = vec![false; num_gt];
    let tp = ious
        .iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in row.iter().enumerate() {
                if !gt_matched[g] && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, iou)) if iou >= threshold => {
                    gt_matched[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    MatchResult { tp, gt_matched }
}

fn prediction_box(p: &Prediction) -> BBox {
    p.mask.tight_box().unwrap_or(p.bbox)
}

fn iou(p: &Prediction, g: &GtInstance, kind: MatchKind) -> f64 {
    match kind {
        MatchKind::Box => prediction_box(p).iou(&g.bbox),
        MatchKind::Mask => {
            // disjoint extents cannot share pixels
            let pb = prediction_box(p);
            if pb.intersection_area(&g.bbox) <= 0.0 {
                return 0.0;
            }
            p.mask.iou(&g.mask).unwrap_or(0.0)
        }
    }
}

fn iou_table(preds: &[&Prediction], gts: &[&GtInstance], kind: MatchKind) -> Vec<Vec<f64>> {
    preds.iter().map(|p| gts.iter().map(|g| iou(p, g, kind)).collect()).collect()
}

/// Matches the predictions and ground truths of one category in one scene.
/// Predictions are taken in the order given.
pub fn match_instances(preds: &[&Prediction], gts: &[&GtInstance], threshold: f64, kind: MatchKind) -> MatchResult {
    match_ious(&iou_table(preds, gts, kind), gts.len(), threshold)
}

/// All-point interpolated AP of true-positive flags sorted by descending
/// score. `None` when there is neither a ground truth nor a prediction.
pub fn average_precision(tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if tp.is_empty() { None } else { Some(0.0) };
    }
    let mut hits = 0usize;
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryAp {
    pub category: usize,
    pub num_gt: usize,
    pub num_pred: usize,
    /// AP per threshold; `None` when the category has neither ground
    /// truths nor predictions.
    pub mask: Vec<Option<f64>>,
    pub boxes: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub categories: Vec<CategoryAp>,
}

impl EvalReport {
    fn index(&self, threshold: f64) -> Option<usize> {
        self.thresholds.iter().position(|t| (t - threshold).abs() < 1e-9)
    }

    fn mean_of(&self, kind: MatchKind, ti: usize) -> f64 {
        let aps: Vec<f64> = self
            .categories
            .iter()
            .filter(|c| c.num_gt > 0)
            .filter_map(|c| match kind {
                MatchKind::Mask => c.mask[ti],
                MatchKind::Box => c.boxes[ti],
            })
            .collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    }

    /// Mean AP over categories with ground truth at one of the evaluated
    /// thresholds.
    pub fn map(&self, kind: MatchKind, threshold: f64) -> Option<f64> {
        self.index(threshold).map(|i| self.mean_of(kind, i))
    }

    /// mAP averaged over every evaluated threshold.
    pub fn map_averaged(&self, kind: MatchKind) -> f64 {
        let n = self.thresholds.len();
        (0..n).map(|i| self.mean_of(kind, i)).sum::<f64>() / n.max(1) as f64
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let shown: Vec<(usize, f64)> = [0.5, 0.7].iter().filter_map(|&t| self.index(t).map(|i| (i, t))).collect();
        let mut s = String::new();
        let _ = write!(s, "{:>8} {:>7} {:>8}", "category", "num_gt", "num_pred");
        for (_, t) in &shown {
            let _ = write!(s, " {:>9}", format!("AP^r@{t:.1}"));
        }
        for (_, t) in &shown {
            let _ = write!(s, " {:>9}", format!("AP^b@{t:.1}"));
        }
        s.push('\n');
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        for c in &self.categories {
            let _ = write!(s, "{:>8} {:>7} {:>8}", c.category, c.num_gt, c.num_pred);
            for (i, _) in &shown {
                let _ = write!(s, " {:>9}", cell(c.mask[*i]));
            }
            for (i, _) in &shown {
                let _ = write!(s, " {:>9}", cell(c.boxes[*i]));
            }
            s.push('\n');
        }
        let _ = write!(s, "{:>8} {:>7} {:>8}", "mean", "", "");
        for (i, _) in &shown {
            let _ = write!(s, " {:>9.3}", self.mean_of(MatchKind::Mask, *i));
        }
        for (i, _) in &shown {
            let _ = write!(s, " {:>9.3}", self.mean_of(MatchKind::Box, *i));
        }
        s.push('\n');
        for (i, t) in &shown {
            let _ = writeln!(s, "mAP^r@{t:.1} = {:.3}", self.mean_of(MatchKind::Mask, *i));
        }
        for (i, t) in &shown {
            let _ = writeln!(s, "mAP^b@{t:.1} = {:.3}", self.mean_of(MatchKind::Box, *i));
        }
        if self.thresholds.len() > 1 {
            let lo = self.thresholds[0];
            let hi = self.thresholds[self.thresholds.len() - 1];
            let _ = writeln!(s, "mAP^r@[{lo:.2}:{hi:.2}] = {:.3}", self.map_averaged(MatchKind::Mask));
            let _ = writeln!(s, "mAP^b@[{lo:.2}:{hi:.2}] = {:.3}", self.map_averaged(MatchKind::Box));
        }
        s
    }

    /// Machine-readable `key = value` block (valid TOML).
    pub fn to_key_values(&self) -> String {
        let mut s = String::from("[summary]\n");
        let tag = |t: f64| format!("{:02}", (t * 100.0).round() as u32);
        for (i, &t) in self.thresholds.iter().enumerate() {
            let _ = writeln!(s, "map_r_{} = {:.6}", tag(t), self.mean_of(MatchKind::Mask, i));
            let _ = writeln!(s, "map_b_{} = {:.6}", tag(t), self.mean_of(MatchKind::Box, i));
        }
        let _ = writeln!(s, "map_r_avg = {:.6}", self.map_averaged(MatchKind::Mask));
        let _ = writeln!(s, "map_b_avg = {:.6}", self.map_averaged(MatchKind::Box));
        for c in &self.categories {
            let _ = writeln!(s, "\n[category.{}]", c.category);
            let _ = writeln!(s, "num_gt = {}\nnum_pred = {}", c.num_gt, c.num_pred);
            for (i, &t) in self.thresholds.iter().enumerate() {
                if let Some(v) = c.mask[i] {
                    let _ = writeln!(s, "ap_r_{} = {v:.6}", tag(t));
                }
                if let Some(v) = c.boxes[i] {
                    let _ = writeln!(s, "ap_b_{} = {v:.6}", tag(t));
                }
            }
        }
        s
    }
}

/// AP of every category 1..=`num_categories` at each threshold, pooling
/// the scenes. Predictions naming unknown scenes or categories are input
/// errors.
pub fn evaluate(preds: &[Prediction], scenes: &[Scene], num_categories: usize, thresholds: &[f64]) -> Result<EvalReport> {
    let by_id: HashMap<&str, usize> = scenes.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut per_scene: Vec<Vec<&Prediction>> = vec![Vec::new(); scenes.len()];
    for (n, p) in preds.iter().enumerate() {
        let Some(&i) = by_id.get(p.scene.as_str()) else {
            return Err(Error::Input(format!("prediction {} names unknown scene {:?}", n + 1, p.scene)));
        };
        if p.category == 0 || p.category > num_categories {
            return Err(Error::Input(format!(
                "prediction {} for scene {:?} has category {} outside 1..={num_categories}",
                n + 1,
                p.scene,
                p.category
            )));
        }
        let s = &scenes[i];
        if p.mask.width() != s.width() || p.mask.height() != s.height() {
            return Err(Error::Input(format!("prediction {} mask size differs from scene {:?}", n + 1, p.scene)));
        }
        per_scene[i].push(p);
    }

    let mut categories = Vec::with_capacity(num_categories);
    for c in 1..=num_categories {
        let mut num_gt = 0;
        // (score, scene, rank within scene) → flags per threshold
        let mut pooled: Vec<(f64, usize, usize, Vec<bool>, Vec<bool>)> = Vec::new();
        for (si, scene) in scenes.iter().enumerate() {
            let gts: Vec<&GtInstance> = scene.instances.iter().filter(|g| g.category == c).collect();
            num_gt += gts.len();
            let mut ps: Vec<&Prediction> = per_scene[si].iter().copied().filter(|p| p.category == c).collect();
            ps.sort_by(|a, b| b.score.total_cmp(&a.score));
            if ps.is_empty() {
                continue;
            }
            let mask_ious = iou_table(&ps, &gts, MatchKind::Mask);
            let box_ious = iou_table(&ps, &gts, MatchKind::Box);
            let mask_tp: Vec<Vec<bool>> = thresholds.iter().map(|&t| match_ious(&mask_ious, gts.len(), t).tp).collect();
            let box_tp: Vec<Vec<bool>> = thresholds.iter().map(|&t| match_ious(&box_ious, gts.len(), t).tp).collect();
            for (k, p) in ps.iter().enumerate() {
                pooled.push((
                    p.score,
                    si,
                    k,
                    mask_tp.iter().map(|f| f[k]).collect(),
                    box_tp.iter().map(|f| f[k]).collect(),
                ));
            }
        }
        pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let ap = |flags: &dyn Fn(&(f64, usize, usize, Vec<bool>, Vec<bool>)) -> bool| {
            average_precision(&pooled.iter().map(flags).collect::<Vec<_>>(), num_gt)
        };
        let mask = (0..thresholds.len()).map(|t| ap(&|e| e.3[t])).collect();
        let boxes = (0..thresholds.len()).map(|t| ap(&|e| e.4[t])).collect();
        categories.push(CategoryAp {
            category: c,
            num_gt,
            num_pred: pooled.len(),
            mask,
            boxes,
        });
    }
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        categories,
    })
}

/// Predictions that reproduce the ground truth exactly, each with score 1.
pub fn ground_truth_predictions(scenes: &[Scene]) -> Vec<Prediction> {
    scenes
        .iter()
        .flat_map(|s| {
            s.instances.iter().map(|g| Prediction {
                scene: s.id.clone(),
                category: g.category,
                score: 1.0,
                bbox: g.bbox,
                mask: g.mask.clone(),
            })
        })
        .collect()
}
