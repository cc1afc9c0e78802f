//! Experiment orchestration: plan parsing, the sequential-task protocol,
//! metric logging, checkpointing and plot-data export.

pub mod metrics;
pub mod plan;
pub mod runner;

pub use metrics::{export_plot_data, final_score, metric_series, read_metrics, MetricRow, MetricsLog};
pub use plan::{alpha_for_task, load_plan, parse_plan, serialize_plan, ExperimentPlan, Profile};
pub use runner::{
    configured_threads, evaluate_run, frame_offsets, phases_for, run_plan, run_seed, state_bytes,
    task_boundaries, SeedPaths, SeedSummary,
};
