//! Experiment orchestration: configs, seeding, training loops, checkpoints,
//! metric logging, transfer runs, sweeps, and task-weight analysis.

pub mod build;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod pca;
pub mod runner;
pub mod sweep;

pub use build::{build_ppo_nets, build_sac, expert_hash, mix_seed, named_params_ppo, named_params_sac};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, RngState, CHECKPOINT_VERSION,
};
pub use config::{
    apply_overrides, Algorithm, ArchConfig, ExperimentConfig, HeadChoice, PpoParams, ReprChoice,
    SacParams,
};
pub use metrics::{read_jsonl, write_jsonl, LossRecord, MetricRecord};
pub use pca::{pca_coordinates, pca_task_weights, symmetric_eigen};
pub use runner::{run_id, run_many, run_training, run_transfer, BaselineReport, EarlyStop, RunArtifacts};
pub use sweep::{comparison_table, mean_ci95, sweep, write_csv, AggregateRow, SweepAxis, SweepReport};

#[derive(Debug, thiserror::Error)]
pub enum ExpError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    #[error(transparent)]
    Rl(#[from] crate::rl::RlError),
}
