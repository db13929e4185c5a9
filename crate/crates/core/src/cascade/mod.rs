//! The three-stage cascade: shared backbone, box proposals, mask
//! regression and instance categorization, trained as one objective.

mod config;
mod model;
mod sampling;
mod train;

pub use config::{CascadeConfig, ConvSpec};
pub use model::{param_specs, Init, Model, ParamSpec};
pub use sampling::{
    assign_anchors, assign_classes, assign_masks, best_match, sample_rois, AnchorTargets, ClassTargets,
    MaskTargets,
};
pub use train::{forward_loss, route_proposals, train_step, LossReport, RoutingPlan, StageVars, TrainForward, Trainer};
pub(crate) use model::{backbone, check_image, classify_head, mask_head, rpn, select_class_deltas, warp_rois, Net};
pub(crate) use train::{best_foreground, boxes_tensor, tensor_boxes};
