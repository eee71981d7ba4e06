//! Experiment plumbing: JSON configs, ground-truth and measurement
//! synthesis, metrics, batch runs, ablation sweeps, and the command line.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod metrics;

pub use config::{ExperimentConfig, KernelSpec, Layout, SpikeConfig, TaskConfig, TaskKind, TruthSource};
pub use experiment::{
    run_ablation, run_experiment, AblationOutput, ExperimentOutput, Summary, TrialRecord,
};
pub use metrics::{compute_metrics, MetricSet};
