//! Five-stage inference and the mask-voting post-process.
//!
//! Stages 2 and 3 run on the routed proposals; the box regressor of each
//! RoI's best non-background category moves it, and stages 4 and 5 rerun
//! the mask and classification heads on the moved boxes. Both instance sets
//! are concatenated and merged per category by mask voting.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::cascade::{best_foreground, boxes_tensor, tensor_boxes, CascadeConfig, Model};
use crate::cascade::{backbone, check_image, classify_head, mask_head, rpn, select_class_deltas, warp_rois, Net};
use crate::error::{Error, Result};
use crate::geometry::{nms, nms_top, render_mask, BBox, BinaryMask, MaskPatch, Proposal, Rle};
use crate::ops::{sigmoid, softmax_in_place};
use crate::reader::{field, ByteReader};
use crate::synth::Scene;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub bbox: BBox,
    /// 1..=N.
    pub category: usize,
    pub score: f64,
    /// m×m mask probabilities over `bbox`.
    pub probs: Vec<f64>,
    /// Binarized mask in image resolution.
    pub mask: BinaryMask,
}

impl Instance {
    pub fn resolution(&self) -> usize {
        (self.probs.len() as f64).sqrt().round() as usize
    }

    /// The probability grid rendered into the image.
    pub fn patch(&self) -> MaskPatch {
        render_mask(&self.probs, self.resolution(), &self.bbox, self.mask.width(), self.mask.height())
    }
}

/// Wall-clock time per pipeline segment, named after the stages they cover.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SegmentTimes {
    /// Shared convolutional features and the proposal head.
    pub conv: Duration,
    pub stage2: Duration,
    pub stage3: Duration,
    pub stage4: Duration,
    pub stage5: Duration,
    /// Proposal decoding and NMS, box regression, rendering and voting.
    pub others: Duration,
}

impl SegmentTimes {
    pub const NAMES: [&'static str; 6] = ["conv", "stage 2", "stage 3", "stage 4", "stage 5", "others"];

    pub fn seconds(&self) -> [f64; 6] {
        [self.conv, self.stage2, self.stage3, self.stage4, self.stage5, self.others].map(|d| d.as_secs_f64())
    }

    pub fn total(&self) -> Duration {
        self.conv + self.stage2 + self.stage3 + self.stage4 + self.stage5 + self.others
    }

    pub fn add(&mut self, o: &SegmentTimes) {
        self.conv += o.conv;
        self.stage2 += o.stage2;
        self.stage3 += o.stage3;
        self.stage4 += o.stage4;
        self.stage5 += o.stage5;
        self.others += o.others;
    }
}

struct Clock(Instant);

impl Clock {
    fn start() -> Self {
        Clock(Instant::now())
    }

    /// Adds the time since the last lap to `slot`.
    fn lap(&mut self, slot: &mut Duration) {
        let now = Instant::now();
        *slot += now - self.0;
        self.0 = now;
    }
}

/// Everything produced by one five-stage pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    pub proposals: Vec<Proposal>,
    /// Boxes fed to stage 4: the proposals moved by their regressors.
    pub regressed: Vec<BBox>,
    /// Stage 2/3 instances followed by stage 4/5 instances.
    pub raw: Vec<Instance>,
}

struct Frontend {
    tape: Tape,
    net: Net,
    features: Var,
    proposals: Vec<Proposal>,
}

fn frontend(model: &Model, image: &Tensor, times: &mut SegmentTimes, clock: &mut Clock) -> Result<Frontend> {
    model.check()?;
    let cfg = &model.config;
    check_image(cfg, image)?;
    let (height, width) = (image.shape()[1] as f64, image.shape()[2] as f64);
    let mut t = Tape::new();
    let net = model.bind(&mut t, false)?;
    let x = t.constant(image.clone());
    let features = backbone(&mut t, &net, cfg, x)?;
    let out = rpn(&mut t, &net, features)?;
    clock.lap(&mut times.conv);

    let (fh, fw) = {
        let s = t.value(features).shape();
        (s[1], s[2])
    };
    let anchors = t.constant(boxes_tensor(&model.anchors(fh, fw)));
    let decoded = t.decode_boxes(anchors, out.deltas)?;
    let clipped = t.clip_boxes(decoded, width, height, cfg.min_box_size)?;
    let boxes = tensor_boxes(t.value(clipped));
    let logits = t.value(out.logits).data();
    let keep = nms_top(&boxes, logits, cfg.nms_infer, cfg.proposal_count);
    let proposals = keep
        .into_iter()
        .map(|i| Proposal {
            bbox: boxes[i],
            objectness: sigmoid(logits[i]),
        })
        .collect();
    clock.lap(&mut times.others);
    Ok(Frontend {
        tape: t,
        net,
        features,
        proposals,
    })
}

/// Stage-1 proposals: decoded, clipped, NMS at `nms_infer`, at most
/// `proposal_count`, in descending objectness.
pub fn propose(model: &Model, image: &Tensor) -> Result<Vec<Proposal>> {
    let mut times = SegmentTimes::default();
    Ok(frontend(model, image, &mut times, &mut Clock::start())?.proposals)
}

struct StageResult {
    instances: Vec<Instance>,
    mask_cls: Tensor,
    reg: Var,
}

/// Mask then classify `boxes`; each RoI becomes one instance of its best
/// non-background category under the mask-level classifier.
fn mask_and_classify(
    t: &mut Tape,
    net: &Net,
    cfg: &CascadeConfig,
    features: Var,
    boxes: &[BBox],
    (width, height): (usize, usize),
    slots: (&mut Duration, &mut Duration),
    clock: &mut Clock,
) -> Result<StageResult> {
    let m = cfg.mask_resolution;
    let box_var = t.constant(boxes_tensor(boxes));
    let warped = warp_rois(t, cfg, features, box_var)?;
    let mask_logits = mask_head(t, net, cfg, warped)?;
    clock.lap(slots.0);
    let heads = classify_head(t, net, cfg, warped, mask_logits)?;
    clock.lap(slots.1);

    let mask_cls = t.value(heads.mask_cls).clone();
    let classes = best_foreground(&mask_cls);
    let k = mask_cls.shape()[1];
    let logits = t.value(mask_logits).data();
    let instances = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut p = mask_cls.data()[i * k..(i + 1) * k].to_vec();
            softmax_in_place(&mut p);
            let probs: Vec<f64> = logits[i * m * m..(i + 1) * m * m].iter().map(|&z| sigmoid(z)).collect();
            let mask = render_mask(&probs, m, b, width, height).binarize(width, height, cfg.binarize_threshold);
            Instance {
                bbox: *b,
                category: classes[i],
                score: p[classes[i]],
                probs,
                mask,
            }
        })
        .collect();
    Ok(StageResult {
        instances,
        mask_cls,
        reg: heads.reg,
    })
}

fn cascade(model: &Model, image: &Tensor, times: &mut SegmentTimes) -> Result<CascadeOutput> {
    let mut clock = Clock::start();
    let Frontend {
        mut tape,
        net,
        features,
        proposals,
    } = frontend(model, image, times, &mut clock)?;
    if proposals.is_empty() {
        return Ok(CascadeOutput {
            proposals,
            regressed: Vec::new(),
            raw: Vec::new(),
        });
    }
    let cfg = &model.config;
    let size = (image.shape()[2], image.shape()[1]);
    let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let t = &mut tape;
    let first = mask_and_classify(t, &net, cfg, features, &boxes, size, (&mut times.stage2, &mut times.stage3), &mut clock)?;

    let classes = best_foreground(&first.mask_cls);
    let deltas = select_class_deltas(t, first.reg, &classes)?;
    let base = t.constant(boxes_tensor(&boxes));
    let moved = t.decode_boxes(base, deltas)?;
    let clipped = t.clip_boxes(moved, size.0 as f64, size.1 as f64, cfg.min_box_size)?;
    let regressed = tensor_boxes(t.value(clipped));
    clock.lap(&mut times.others);

    let second = mask_and_classify(t, &net, cfg, features, &regressed, size, (&mut times.stage4, &mut times.stage5), &mut clock)?;
    let mut raw = first.instances;
    raw.extend(second.instances);
    clock.lap(&mut times.others);
    Ok(CascadeOutput {
        proposals,
        regressed,
        raw,
    })
}

/// Runs the five stages on one `[C, H, W]` image, returning the
/// 2 × (number of proposals) raw instances.
pub fn run_cascade_inference(model: &Model, image: &Tensor) -> Result<CascadeOutput> {
    cascade(model, image, &mut SegmentTimes::default())
}

/// Score-weighted pixel average of probability patches over the union of
/// their extents.
pub fn merge_patches(patches: &[(&MaskPatch, f64)]) -> MaskPatch {
    let nonempty = || patches.iter().filter(|(p, _)| p.w > 0 && p.h > 0);
    let Some(x0) = nonempty().map(|(p, _)| p.x0).min() else {
        return MaskPatch {
            x0: 0,
            y0: 0,
            w: 0,
            h: 0,
            probs: Vec::new(),
        };
    };
    let y0 = nonempty().map(|(p, _)| p.y0).min().unwrap();
    let x1 = nonempty().map(|(p, _)| p.x0 + p.w).max().unwrap();
    let y1 = nonempty().map(|(p, _)| p.y0 + p.h).max().unwrap();
    let (w, h) = (x1 - x0, y1 - y0);
    let total: f64 = patches.iter().map(|(_, s)| s).sum();
    let uniform = !(total > 0.0);
    let mut acc = vec![0.0; w * h];
    for (p, s) in nonempty() {
        let weight = if uniform { 1.0 / patches.len() as f64 } else { s / total };
        for y in 0..p.h {
            let row = (p.y0 + y - y0) * w + (p.x0 - x0);
            for x in 0..p.w {
                acc[row + x] += weight * p.probs[y * p.w + x];
            }
        }
    }
    MaskPatch {
        x0,
        y0,
        w,
        h,
        probs: acc,
    }
}

/// Per category: NMS at `voting_nms` by score, then each kept instance's
/// mask becomes the score-weighted average of every same-category
/// instance whose box overlaps it by at least `voting_iou`, itself
/// included, binarized at `binarize_threshold`. Scores and boxes are
/// those of the kept instances. Output is in descending score.
pub fn mask_voting(raw: &[Instance], cfg: &CascadeConfig) -> Vec<Instance> {
    let mut out = Vec::new();
    let mut categories: Vec<usize> = raw.iter().map(|i| i.category).collect();
    categories.sort_unstable();
    categories.dedup();
    for c in categories {
        let members: Vec<&Instance> = raw.iter().filter(|i| i.category == c).collect();
        let boxes: Vec<BBox> = members.iter().map(|i| i.bbox).collect();
        let scores: Vec<f64> = members.iter().map(|i| i.score).collect();
        let patches: Vec<MaskPatch> = members.iter().map(|i| i.patch()).collect();
        for k in nms(&boxes, &scores, cfg.voting_nms) {
            let group: Vec<(&MaskPatch, f64)> = (0..members.len())
                .filter(|&j| j == k || boxes[j].iou(&boxes[k]) >= cfg.voting_iou)
                .map(|j| (&patches[j], scores[j]))
                .collect();
            let merged = merge_patches(&group);
            let kept = members[k];
            let (width, height) = (kept.mask.width(), kept.mask.height());
            out.push(Instance {
                mask: merged.binarize(width, height, cfg.binarize_threshold),
                ..kept.clone()
            });
        }
    }
    sort_by_score(&mut out, |i| i.score);
    out
}

fn sort_by_score<T>(items: &mut [T], score: impl Fn(&T) -> f64) {
    items.sort_by(|a, b| score(b).total_cmp(&score(a)));
}

/// Final detections for one image: five-stage inference, mask voting, then
/// the `min_score` and `max_detections` cuts.
pub fn detect(model: &Model, image: &Tensor) -> Result<Vec<Instance>> {
    detect_timed(model, image).map(|(d, _)| d)
}

/// [`detect`] with the time spent in each segment.
pub fn detect_timed(model: &Model, image: &Tensor) -> Result<(Vec<Instance>, SegmentTimes)> {
    let mut times = SegmentTimes::default();
    let output = cascade(model, image, &mut times)?;
    let mut clock = Clock::start();
    let cfg = &model.config;
    let mut found = mask_voting(&output.raw, cfg);
    found.retain(|i| i.score >= cfg.min_score);
    found.truncate(cfg.max_detections);
    clock.lap(&mut times.others);
    Ok((found, times))
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scene: String,
    pub category: usize,
    pub score: f64,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

const PRED_MAGIC: &str = "MNCPRED 1";

/// Detections of every scene, in dataset order and descending score within
/// each scene.
pub fn predict_scenes(
    model: &Model,
    scenes: &[Scene],
    mut on_scene: impl FnMut(usize, &SegmentTimes),
) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let (found, times) = detect_timed(model, &scene.image)?;
        out.extend(found.into_iter().map(|d| Prediction {
            scene: scene.id.clone(),
            category: d.category,
            score: d.score,
            bbox: d.bbox,
            mask: d.mask,
        }));
        on_scene(i, &times);
    }
    Ok(out)
}

/// Writes the text prediction format:
///
/// ```text
/// MNCPRED 1
/// <scene> <category> <score> <x> <y> <w> <h> <rle>
/// ```
///
/// Records are written in the given order; [`predict_scenes`] produces
/// descending score within each scene.
pub fn write_predictions(w: &mut impl Write, preds: &[Prediction]) -> Result<()> {
    writeln!(w, "{PRED_MAGIC}")?;
    for p in preds {
        let b = p.bbox;
        writeln!(w, "{} {} {:?} {:?} {:?} {:?} {:?} {}", p.scene, p.category, p.score, b.x, b.y, b.w, b.h, p.mask.to_rle())?;
    }
    Ok(())
}

pub fn save_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_predictions(&mut w, preds)?;
    w.flush()?;
    Ok(())
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    parse_predictions(&std::fs::read(path)?)
}

pub fn parse_predictions(bytes: &[u8]) -> Result<Vec<Prediction>> {
    let mut r = ByteReader::new(bytes);
    let (off, magic) = r.line()?;
    if magic != PRED_MAGIC {
        return Err(ByteReader::error_at(off, format!("expected {PRED_MAGIC:?}")));
    }
    let mut out = Vec::new();
    while !r.at_end() {
        let (off, line) = r.line()?;
        let mut t = line.splitn(8, ' ');
        let scene: String = field(t.next(), off, "scene id")?;
        let category: usize = field(t.next(), off, "category")?;
        let score: f64 = field(t.next(), off, "score")?;
        let x: f64 = field(t.next(), off, "box x")?;
        let y: f64 = field(t.next(), off, "box y")?;
        let w: f64 = field(t.next(), off, "box w")?;
        let h: f64 = field(t.next(), off, "box h")?;
        let rle: Rle = t
            .next()
            .ok_or_else(|| ByteReader::error_at(off, "missing mask"))?
            .parse()
            .map_err(|e: Error| ByteReader::error_at(off, e.to_string()))?;
        let mask = rle.decode().map_err(|e| ByteReader::error_at(off, e.to_string()))?;
        out.push(Prediction {
            scene,
            category,
            score,
            bbox: BBox::new(x, y, w, h),
            mask,
        });
    }
    Ok(out)
}
