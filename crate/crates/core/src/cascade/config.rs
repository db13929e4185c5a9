use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::LrSchedule;

/// One backbone convolution followed by ReLU; padding is `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
        }
    }
}

/// Every hyper-parameter of the cascade, its training loop and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    /// Object categories N; the classifiers have N + 1 outputs.
    pub num_categories: usize,
    pub in_channels: usize,
    pub backbone: Vec<ConvSpec>,
    pub rpn_channels: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,

    /// Mask regression resolution m.
    pub mask_resolution: usize,
    /// RoI warp output W′ = H′.
    pub warp_size: usize,
    pub stage2_pool: usize,
    pub stage3_pool: usize,
    pub mask_hidden: usize,
    pub stage3_hidden: usize,

    pub proposal_count: usize,
    pub nms_train: f64,
    pub nms_infer: f64,
    /// Proposals are clipped to the image and widened to at least this size.
    pub min_box_size: f64,

    pub anchors_per_image: usize,
    pub anchor_positive_fraction: f64,
    pub anchor_positive_iou: f64,
    pub anchor_negative_iou: f64,
    pub rois_per_image: usize,
    pub roi_foreground_fraction: f64,
    /// Box IoU above which a RoI is foreground for stages 2 and 3.
    pub foreground_iou: f64,
    /// Mask IoU required by the mask-level classifier's positives.
    pub mask_iou: f64,
    /// Ground-truth boxes join the routed proposals as training RoIs.
    pub append_gt_boxes: bool,
    /// 3 or 5.
    pub train_stages: usize,

    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled to at most this joint norm; 0 disables.
    pub max_grad_norm: f64,
    /// Factor on the stage-2..5 gradient that reaches the proposal head
    /// through the RoI coordinates. 1 is exact end-to-end training.
    pub proposal_box_grad: f64,

    pub binarize_threshold: f64,
    pub voting_nms: f64,
    pub voting_iou: f64,
    pub min_score: f64,
    pub max_detections: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            num_categories: 2,
            in_channels: 1,
            backbone: vec![ConvSpec::new(8, 5, 2), ConvSpec::new(16, 5, 2), ConvSpec::new(16, 3, 2)],
            rpn_channels: 16,
            anchor_scales: vec![8.0, 16.0, 32.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            mask_resolution: 28,
            warp_size: 28,
            stage2_pool: 2,
            stage3_pool: 4,
            mask_hidden: 256,
            stage3_hidden: 64,
            proposal_count: 300,
            nms_train: 0.7,
            nms_infer: 0.7,
            min_box_size: 1.0,
            anchors_per_image: 256,
            anchor_positive_fraction: 0.5,
            anchor_positive_iou: 0.7,
            anchor_negative_iou: 0.3,
            rois_per_image: 64,
            roi_foreground_fraction: 0.25,
            foreground_iou: 0.5,
            mask_iou: 0.5,
            append_gt_boxes: true,
            train_stages: 5,
            schedule: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 0.0,
            max_grad_norm: 0.0,
            proposal_box_grad: 1.0,
            binarize_threshold: 0.5,
            voting_nms: 0.3,
            voting_iou: 0.5,
            min_score: 1e-3,
            max_detections: 100,
        }
    }
}

impl CascadeConfig {
    /// Total backbone stride in image pixels per feature cell.
    pub fn stride(&self) -> usize {
        self.backbone.iter().map(|c| c.stride).product()
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.last().map_or(self.in_channels, |c| c.out_channels)
    }

    pub fn anchors_per_position(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    /// Side of the stage-3 pooled feature, the resolution masks are resized to.
    pub fn stage3_size(&self) -> usize {
        self.warp_size / self.stage3_pool
    }

    pub fn stage2_size(&self) -> usize {
        self.warp_size / self.stage2_pool
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_categories == 0 {
            return bad("num_categories must be at least 1".into());
        }
        if self.mask_resolution < 2 {
            return bad("mask_resolution must be at least 2".into());
        }
        if self.in_channels == 0 || self.backbone.is_empty() {
            return bad("the backbone needs input channels and at least one layer".into());
        }
        if self.backbone.iter().any(|c| c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
            return bad("backbone layers need positive channels, kernel and stride".into());
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return bad("anchor scales and ratios must be nonempty".into());
        }
        if self.anchor_scales.iter().chain(&self.anchor_ratios).any(|v| !(*v > 0.0)) {
            return bad("anchor scales and ratios must be positive".into());
        }
        for (name, pool) in [("stage2_pool", self.stage2_pool), ("stage3_pool", self.stage3_pool)] {
            if pool == 0 || self.warp_size % pool != 0 {
                return bad(format!("{name} {pool} must divide warp_size {}", self.warp_size));
            }
        }
        if self.train_stages != 3 && self.train_stages != 5 {
            return bad(format!("train_stages must be 3 or 5, not {}", self.train_stages));
        }
        if self.proposal_count == 0 || self.anchors_per_image == 0 || self.rois_per_image == 0 {
            return bad("proposal, anchor and RoI counts must be positive".into());
        }
        if !(self.min_box_size > 0.0) {
            return bad("min_box_size must be positive".into());
        }
        if self.schedule.phases.is_empty() {
            return bad("the learning-rate schedule is empty".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.proposal_box_grad) {
            return bad("proposal_box_grad must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: CascadeConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
