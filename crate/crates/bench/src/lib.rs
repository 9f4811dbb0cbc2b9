//! Workload generation, scenario runs and latency reports for the
//! simulated serving stack.

pub mod config;
pub mod report;
pub mod scenario;
pub mod workload;

pub use config::{BenchConfig, Scenario};
pub use report::{report_compare, Aggregates, Comparison, QueryRow, RunReport, Summary, Verdict};
pub use scenario::{oracle_outputs, run_scenario, run_schedule};
pub use workload::{generate_workload, Scheduled, WorkloadKind, WorkloadSpec};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Storage(#[from] kvtier_core::StorageError),
    #[error(transparent)]
    Transfer(#[from] kvtier_transfer::TransferError),
    #[error(transparent)]
    Engine(#[from] kvtier_engine::EngineError),
    #[error(transparent)]
    Pd(#[from] kvtier_engine::PdRunError),
}
