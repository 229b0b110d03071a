//! Reconstruction and selection losses, the isolated-gradient step, the
//! pretraining loop and checkpoint files.

mod checkpoint;
mod config;
mod losses;
mod run;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::PretrainConfig;
pub use losses::{reconstruction_errors, reconstruction_loss, selection_loss, LossKind};
pub use run::{
    build_clip_graph, checkpoint_config, config_snapshot, json_diff, load_model, pretrain_run, pretrain_step,
    save_training_checkpoint, BatchItem, ClipGraph, LogRecord, LossReport, MaskSource, RunOptions, RunOutcome,
    StepOutput, TrainState, CONFIG_FILE, LAST_CHECKPOINT, METRICS_FILE,
};
