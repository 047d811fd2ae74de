//! Class-incremental protocol: schedules, relabeling, training and evaluation.

pub mod labels;
pub mod metrics;
pub mod output;
pub mod protocol;
pub mod run;
pub mod train;

pub use labels::{pseudo_label, relabel, split_known_class, to_targets, PixelLabel};
pub use protocol::{IncrementMode, Protocol, TaskSpec, TaskStep};
pub use metrics::{evaluate, ClassIou, MetricsReport, SplitName};
pub use train::{train_task, Objective, PixelSet, TrainConfig, TrainStats};
pub use run::{expand_head, run_protocol, RunConfig, RunResult, TaskOutcome, Variant};
pub use output::{Checkpoint, Report, RunManifest, RunSummary};
