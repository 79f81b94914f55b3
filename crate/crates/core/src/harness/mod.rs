//! Experiments, metrics and result files.

pub mod config;
pub mod emit;
pub mod experiment;
pub mod pipeline;

pub use config::{Config, ExperimentConfig};
pub use emit::{
    emit_results, read_summary, read_usage, write_rollouts, write_summary, write_sweep, write_usage, SummaryRow,
};
pub use experiment::{
    compute_metrics, linear_fit, mean_se, never_recoverable, run_experiment, step_latency, sweep_t, ExperimentResult,
    ExperimentSpec, Latency, LinearFit, Metrics, Policies, RolloutLog, ShieldMode, SweepRow, Usage,
};
pub use pipeline::{train_learned, train_policies, train_recovery_policy, training_env};
