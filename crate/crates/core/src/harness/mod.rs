//! Cross-validated training, nested threshold search, metrics, checkpoints
//! and the command-line driver.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod metrics;
pub mod pipeline;
pub mod split;
pub mod train;
pub mod tuner;

pub use checkpoint::{Checkpoint, CheckpointMeta, EpochRecord};
pub use config::{Objective, RunConfig, Sampler, SweepConfig, TrainConfig, TuneConfig};
pub use data::{encode, make_batch, subject_tokens, Dataset, Encoded, Normalizer, SubjectData};
pub use metrics::{auc_mann_whitney, auc_trapezoid, evaluate_scores, MeanStd, Metrics, Summary};
pub use pipeline::{
    audit_fold, cross_validate, evaluate_checkpoint, full_model_grad_check, run_fold, sweep_csv, sweep_loss_weights,
    toy_dataset, write_reports, CvReport, FoldReport, FoldRun, LeakageAudit, SweepRow, ThresholdMap,
};
pub use split::{loso_split, stratified_kfold, Fold};
pub use train::{predict, train_model, TrainAudit, TrainOptions, TrainOutcome};
pub use tuner::{roi_macro_f1, search, strength_macro_f1, tune_thresholds, FoldChoice, TrialRecord, TuneResult};
