//! Experiment driver: config files, checkpoints, the pipeline commands and
//! their reports.
mod checkpoint;
mod commands;
mod config;
mod pipeline;

pub use checkpoint::{
    Checkpoint, CheckpointHeader, DirectoryEntry, TrainState, TrainStateHeader, FORMAT_VERSION, MAGIC,
};
pub use commands::{
    ade_template, cmd_eval, cmd_importance, cmd_reproduce, cmd_surgery, cmd_train, interval_checkpoint_name,
    read_eval_report, Check, PlanManifest, ReproduceSummary, SummaryRow, SurgeryArgs,
};
pub use config::{AdeTemplate, ArmConfig, CorpusSource, DataConfig, ExperimentConfig, ReproduceConfig, TaskConfig};
pub use pipeline::{ArmOutcome, ArmOutcomeParts, Lab};
