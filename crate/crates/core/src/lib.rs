//! Multi-view hand keypoint annotation from fisheye rigs.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod crop;
pub mod detections;
pub mod evaluation;
pub mod hand;
pub mod image;
pub mod pipeline;
pub mod synth;
pub mod textfmt;
pub mod triangulation;
