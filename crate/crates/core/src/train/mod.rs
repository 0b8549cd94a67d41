//! Training orchestration, evaluation, ablation and consistency tracking.

pub mod config;
pub mod runs;
pub mod trainer;

pub use config::TrainConfig;
pub use runs::{ablate, consistency_track, evaluate_checkpoint, AblationReport, AblationRow, ConsistencyRow, ConsistencyTrack, Evaluation};
pub use trainer::{predict_all, EpochReport, StepReport, TrainSummary, Trainer, TRAIN_LOG_HEADER};

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "SYNMATCH_THREADS";

/// Worker thread cap from `SYNMATCH_THREADS`; 1 when unset or invalid.
/// Training itself is single-threaded; only inference over evaluation
/// sets is spread across workers.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
