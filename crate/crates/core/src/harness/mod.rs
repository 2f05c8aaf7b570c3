//! Experiment orchestration: synthetic profiles, scenarios, seeded
//! FAD/CMR sweeps, error metrics, and result aggregation.

pub mod metrics;
pub mod profiles;
pub mod report;
pub mod scenario;
pub mod sweep;

pub use metrics::{mape, miae, summarize_errors, ErrorSummary};
pub use profiles::{generate_load_profiles, simulate_truth, ProfileParams};
pub use report::{aggregate, write_report_tables, AggregateRow};
pub use scenario::{CsConfig, Method, Scenario};
pub use sweep::{
    derive_seed, run_instance, run_sweep, write_results_csv, InstanceResult, MetricsRow,
    SweepContext,
};
