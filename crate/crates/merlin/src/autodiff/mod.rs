//! Minimal reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! The operator set is fixed to exactly what the residual U-Net and the
//! likelihood losses require: 3x3 and 1x1 convolutions (stride 1, zero
//! padding), leaky ReLU, 2x2 max pooling, nearest-neighbor upsampling,
//! channel concatenation, elementwise add/sub, scalar multiplication,
//! exp/log, full reductions, and the two fused loss nodes. No broadcasting,
//! no dynamic shapes; every backward rule is individually testable against
//! finite differences.

mod gradcheck;
mod graph;
pub mod ops;
mod optim;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckEntry, GradCheckReport, PARAM_LIMIT};
pub use graph::{AutodiffError, Graph, NodeId, OpKind, ParamSlot, EXP_CLAMP};
pub use optim::{adam_step, clip_global_norm, AdamHyper, AdamState};
pub use tensor::{Real, Tensor};
