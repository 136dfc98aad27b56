//! Single-class detection: boxes and suppression, the mAP evaluator,
//! SGD with momentum and weight decay, the detector model, and the
//! training/checkpoint machinery.

pub mod boxes;
pub mod eval;
pub mod model;
pub mod sgd;
pub mod train;

pub use boxes::{iou, nms, DetectionBox};
pub use eval::{evaluate_map, pred_gt_iou, EvalResult, MatchRecord};
pub use model::{
    assign_targets, decode_level, detection_loss, level_for_box, ArchConfig, Detector,
    DetectorCache, LevelTargets, LossBreakdown, BACKBONE_WIDTHS, HEAD_CHANNELS,
};
pub use sgd::{sgd_step, SgdState, TrainConfig};
pub use train::{
    build_dataset, evaluate_detector, load_checkpoint, predictions_for, run_cell, save_checkpoint,
    train_detector, AblationCell, CheckpointMeta, DatasetSplits, EpochRow, TrainOutcome,
    EVAL_NMS_THRESH, EVAL_SCORE_THRESH, MAP_IOU_THRESH, TEST_COUNT, TRAIN_COUNT, VAL_COUNT,
};
