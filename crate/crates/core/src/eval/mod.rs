//! Metrics, the argmax baseline, experiment orchestration and robustness
//! sweeps.

pub mod config;
pub mod experiment;
pub mod metrics;

pub use config::{ExperimentConfig, Method};
pub use experiment::{run_experiment, run_sweep, ExperimentOutcome, SweepRow};
pub use metrics::{compute_metrics, run_baseline_argmax, MetricsReport};
