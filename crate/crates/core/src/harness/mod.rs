//! Experiment plumbing: configuration, data, task streams, pretraining,
//! metrics, sweeps, cost profiling and embedding export.

pub mod ablation;
pub mod config;
pub mod data;
pub mod embed;
pub mod experiment;
pub mod metrics;
pub mod pretrain;
pub mod profiler;
pub mod stream;

pub use ablation::{ablation_sweep, AblationTable, Axis};
pub use config::ExperimentConfig;
pub use data::{gen_synthetic, load_dataset};
pub use embed::{export_embeddings, Pca2};
pub use experiment::{prepare_data, run_experiment, run_method, Method, PreparedData, RunOptions, RunOutput};
pub use metrics::{run_stream, AccuracyRecord};
pub use pretrain::pretrain_backbone;
pub use profiler::{flop_estimate, measure_macs, CostModel};
pub use stream::{make_task_stream, TaskStream};
