//! Losses, anchor assignment, optimizer, synthetic data, evaluation and the training loop.

mod assign;
mod data;
mod eval;
mod loss;
mod sgd;
mod trainer;

pub use assign::{assign_anchors, AnchorLabel, NEG_IOU, POS_IOU};
pub use data::{
    load_dataset, read_image_record, render_sample, synth_generate, write_image_record, AnnotationFile, Dataset,
    ImageRecord, ObjectRecord, Sample, SynthConfig, CLASS_NAMES, IMAGE_MAGIC,
};
pub use eval::{average_precision, evaluate_map, match_detections, EvalReport, COCO_THRESHOLDS};
pub use loss::{box_loss, focal_loss, BOX_BETA};
pub use sgd::{LrSchedule, Sgd, SgdConfig};
pub use trainer::{build_targets, clip_grad_norm, detection_loss, evaluate_detector, train, BatchTargets, StepRecord, TrainError, TrainOutcome};
