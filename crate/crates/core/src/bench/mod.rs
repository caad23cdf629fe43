//! Baselines, evaluation metrics, the sharing sweep and aggregation.

pub mod aggregate;
pub mod baselines;
pub mod metrics;
pub mod sweep;

pub use aggregate::{aggregate, aggregate_by_method, Summary};
pub use baselines::{baseline_direct, baseline_select, SelectionConfig};
pub use metrics::{
    calibrate_beta, data_penalties, expected_uncertainty, policy_return, suboptimality,
    xi_coverage,
};
pub use sweep::{
    desk_family, desk_pessimism, run_cell, run_sharing_grid, shared_label, write_csv, CellOutcome,
    ExperimentResult, Job, Method, ShareMode, SweepPlan,
};
