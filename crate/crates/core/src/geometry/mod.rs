//! Boxes, masks, anchors, overlap measures, box-delta coding and
//! non-maximum suppression.

mod anchors;
mod bbox;
mod mask;
mod nms;
mod render;

pub use anchors::generate_anchors;
pub use bbox::{decode_box, encode_box, BBox, BoxDelta, Proposal, MAX_LOG_SCALE};
pub use mask::{BinaryMask, Rle};
pub use nms::{nms, nms_top};
pub use render::{crop_mask, pixel_span, render_mask, MaskPatch};
