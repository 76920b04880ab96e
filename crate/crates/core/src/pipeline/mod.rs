//! End-to-end multi-task training and evaluation: per-expert downsampling,
//! frozen experts, LoRA heads, gate, weighted sum and task loss.

mod config;
mod data;
mod evaluate;
mod joint;
mod model;
mod report;
mod suite;
mod train;

pub use config::{check_split, derive_seed, ExperimentConfig};
pub use data::{prepare_generated, prepare_manifest, prepare_records, record_view, split, PreparedDataset, RecordView, Split};
pub use evaluate::{bench, bench_cached, evaluate, Efficiency, Evaluation};
pub use joint::{bench_joint_cached, evaluate_joint, train_joint, JointModel};
pub use model::{BatchOutput, EnEcgModel, Mixer, MixerInit};
pub use report::{mean_std, ComparisonReport, ComparisonRow, MetricsReport, Stat, TaskReport, NOT_APPLICABLE};
pub use suite::{
    comparison_report, metrics_report, run_repeat, run_suite, strategy_model, RepeatRun, SingleRun, StrategyRun,
    TaskRun, COMPARISON_COLUMNS,
};
pub use train::{assemble, fit, init_model, train_moe, train_singles, train_task, TrainLog, TrainOptions};
