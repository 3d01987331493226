//! Training loops, run configuration, the RunLog and the collapse monitor.

mod config;
mod runlog;
mod train;

pub use config::{Schedule, TrainConfig, KEYS};
pub use runlog::{monitor_kl, KlWarning, RunLog, RunRow, COLLAPSE_PATIENCE, RUNLOG_HEADER};
pub use train::{build_step, sidecar, train, NamedLoss, StepGraph, StepKeys, StepValue, TrainOutcome, Trainer};
