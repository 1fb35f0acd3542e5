//! Toy anchor-based detector: stem, MBConv stages, bidirectional pyramid, shared heads.

mod anchors;
mod bifpn;
mod boxes;
mod config;
mod model;
mod nms;

pub use anchors::{anchor_count, generate_anchors, Anchor, LevelGeometry};
pub use bifpn::Bifpn;
pub use boxes::{decode, decode_boxes, encode, iou, BBox, Detection, MAX_LOG_SCALE};
pub use config::{preset, ModelConfig, StageConfig, PRESETS};
pub use model::{postprocess, Detector, PostprocessOptions};
pub use nms::nms;
