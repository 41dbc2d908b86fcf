//! Workloads, execution modes and the overhead/call-rate metrics.

mod metrics;
mod report;
mod runner;
mod workload;

use thiserror::Error;

pub use metrics::{
    cps, cps_from_total, overhead_percent, weighted_calls, MetricsError, MetricsReport, Stats, TimingReport,
};
pub use report::BenchReport;
pub use runner::{
    measure, new_session, restart_and_finish, run_on_session, run_until_checkpoint, run_with_restart, run_workload,
    Counting, Mode, RunOutcome, WORKLOAD_ARENA,
};
pub use workload::{
    blas_shape, digest_bytes, program, resume, uvm_slots, uvm_task, Program, UvmTask, WorkloadKind, WorkloadSpec,
    DIGEST_INIT, GEMM_COLS, GEMM_INNER, GEMV_COLS, SHIFTS, UVM_DEFAULT_SEED, UVM_SLOT,
};

use crate::device::DeviceError;
use crate::engine::EngineError;
use crate::shim::CallError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("application state unreadable: {0}")]
    BadState(String),
    #[error("readback mismatch: {0}")]
    Readback(String),
    #[error(transparent)]
    Call(#[from] CallError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<DeviceError> for HarnessError {
    fn from(e: DeviceError) -> Self {
        HarnessError::Call(e.into())
    }
}
