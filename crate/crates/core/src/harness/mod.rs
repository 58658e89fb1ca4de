//! Experiment orchestration behind the `cdpo` command line.

pub mod config;
pub mod curves;
pub mod eval;
pub mod metrics;
pub mod models;
pub mod train;

pub use config::{ExperimentConfig, FinetuneMode, Variant};
pub use curves::emit_curves;
pub use eval::{evaluate, EvalSummary, WinStats};
pub use metrics::{read_metrics, write_metrics, MetricsRow};
pub use models::{Model, Sampler, SamplerSpec};
pub use train::{
    distill, finetune_curriculum, finetune_plain, pretrain, Context, FinetuneOutput, StagePlan, StageTransition,
    TrainOutput,
};
