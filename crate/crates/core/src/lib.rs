//! Multi-task network cascades for instance-aware segmentation.
//!
//! The crate provides a small reverse-mode autodiff core ([`tape`], [`ops`],
//! [`loss`]), box and mask geometry ([`geometry`]), the differentiable RoI
//! warping layer ([`roi_warp`]), the three-stage cascade with its unified
//! training objective ([`cascade`]), five-stage inference with mask voting
//! ([`inference`]), mask/box average precision ([`evaluation`]) and a
//! synthetic shapes dataset ([`synth`]).

pub mod box_ops;
pub mod cascade;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod inference;
pub mod loss;
pub mod ops;
pub mod params;
mod reader;
pub mod roi_warp;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{LrPhase, LrSchedule, ParameterStore, Sgd};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
