//! Knowledge distillation from a teacher into a student using a pool of
//! synthetic and guidance samples.

mod kd;
mod pool;
mod run;

pub use kd::{kd_loss, KdConfig, KdDirection, RunMode};
pub use pool::{PoolBatch, PoolSource, SyntheticPool};
pub use run::{
    distill_epoch, read_metrics, run_distillation, teacher_labels, DistillOutcome, DistillRun, MetricsRow,
    RunSummary, METRICS_FILE, STUDENT_DIR, SUMMARY_FILE, SYNTHETIC_DIR, TIMING_FILE,
};
