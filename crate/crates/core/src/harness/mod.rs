//! Datasets, experiment configuration, metrics, and report emission.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod report;

pub use config::{
    AttackSection, DatasetConfig, EnsembleConfig, ExperimentConfig, ModelConfig, OutputConfig,
    ReportFormat,
};
pub use dataset::{gen_synthetic, gen_synthetic_split, load_cifar10_binary, Dataset, Split, SyntheticSpec};
pub use experiment::{evaluate_clean, run_experiment, ExperimentOutput, WrittenFiles};
pub use report::{AttackColumn, BitmapRecord, EvalReport, ReportRow, RunMeta};
