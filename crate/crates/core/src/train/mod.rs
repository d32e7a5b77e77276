//! Adversary-aware training, evaluation metrics, robustness evaluation,
//! cross-validation, ablations, sweeps and checkpoints.

mod checkpoint;
mod cv;
mod metrics;
mod trainer;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use cv::{
    ablate, ablation_table, cross_validate, prepare_folds, run_fold, sweep, sweep_table, AblationRow, CvConfig,
    CvResult, FoldRun, Knob, ParamGrid, SweepRow,
};
pub use metrics::{evaluate, relative_drop, robustness_eval, FoldMetrics, MetricsReport, Scores, ValidationScore};
pub use trainer::{train, validation_score, EpochSummary, StepLog, TrainConfig, TrainOutput};
