use std::cmp::Ordering;

use super::BBox;

/// Greedy non-maximum suppression.
///
/// Repeatedly keeps the highest-scoring remaining candidate and drops every
/// remaining candidate whose IoU with it exceeds `iou_threshold`. Equal
/// scores are visited in index order. Returns kept indices in visit order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    nms_top(boxes, scores, iou_threshold, usize::MAX)
}

/// [`nms`] stopped once `max_keep` candidates are kept; the result is the
/// first `max_keep` entries of the full run.
pub fn nms_top(boxes: &[BBox], scores: &[f64], iou_threshold: f64, max_keep: usize) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    if max_keep == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| descending(scores[a], scores[b]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        if keep.len() >= max_keep {
            break;
        }
        for &j in &order[pos + 1..] {
            if !suppressed[j] && boxes[i].iou(&boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub(crate) fn descending(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}
