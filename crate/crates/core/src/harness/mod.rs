//! Synthetic tasks, toy training, evaluation, relation export and a
//! self-check suite.

mod export;
mod selftest;
mod tasks;
mod train;

pub use export::{export_relations, ExportManifest, ExportedMatrix};
pub use selftest::{run_selftest, CheckResult};
pub use tasks::{dot_column, Split, SyntheticTask, TaskKind, DOT, MAX_SPEED, NOISE_STD};
pub use train::{evaluate, history_csv, top1, toy_model_config, train, AdamW, EpochMetrics, TrainConfig, TrainOutcome};
