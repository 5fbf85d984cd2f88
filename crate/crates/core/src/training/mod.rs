//! Optimization, scheduling, and the training loops for both model kinds.

mod loops;
mod model;
mod optim;

pub use loops::{
    evaluate, rescaling_deviation_with, rescaling_equivalence_check, train_joint,
    train_joint_observed, train_stage, EpochRecord, RescalingDeviation, StageConfig,
    StageSchedule, TrainConfig, TrainOutcome, TrainTelemetry,
};
pub use model::{
    load_checkpoint, save_checkpoint, ChainModel, Checkpoint, GcrfModel, ModelKind, Objective,
    TrainableModel, CHECKPOINT_FORMAT_VERSION,
};
pub use optim::{
    EarlyStop, Optimizer, OptimizerKind, PatiencePreset, PlateauScheduler, PATIENCE_CHUNKING,
    PATIENCE_OCR, PATIENCE_SEGMENTATION,
};
