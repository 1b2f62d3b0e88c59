//! Three-stage training, checkpoints, curve export and evaluation.

mod checkpoint;
mod config;
mod curves;
mod stages;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Stage, StoredMetrics, MAGIC, VERSION,
};
pub use config::{DecoderSettings, ImageMode, RunConfig, StageBatchSizes, StageEpochs};
pub use curves::{curves_csv, export_curves, format_g9};
pub use stages::{
    caption_image, caption_tensor, checkpoint_path, curve_path, evaluate, evaluate_joint, hidden_sweep, load_images,
    run_all, select_split, train_joint, train_joint_prepared, train_stage1, train_stage1_prepared, train_stage2,
    train_stage2_prepared, write_stage, DecodeMode, FeatureCache, PreparedData, RunSummary, Split, Stage2Output,
    StageOutput, SweepEntry,
};
