//! JSON report emitted by the benchmark front end.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{cps, overhead_percent, MetricsError, Stats, TimingReport};
use super::runner::Mode;
use super::workload::WorkloadSpec;

/// Timing of one mode against the native baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub workload: String,
    pub mode: String,
    pub seed: u64,
    pub data_bytes: u64,
    pub iterations: u64,
    pub threads: usize,
    /// Wall time of the requested mode.
    pub e_seconds: Stats,
    /// Wall time of the uninstrumented run.
    pub e_native_seconds: Stats,
    pub call_counts: BTreeMap<String, u64>,
    pub overhead_percent: f64,
    pub cps: f64,
}

impl BenchReport {
    pub fn new(spec: &WorkloadSpec, mode: Mode, timing: &TimingReport) -> Result<Self, MetricsError> {
        let e = match mode {
            Mode::Native => &timing.e_native,
            Mode::Direct => &timing.e_direct,
            Mode::Proxy => &timing.e_proxy,
        };
        Ok(Self {
            workload: spec.kind.as_str().to_owned(),
            mode: mode.as_str().to_owned(),
            seed: spec.seed,
            data_bytes: spec.data_bytes,
            iterations: spec.iterations,
            threads: timing.threads,
            e_seconds: e.clone(),
            e_native_seconds: timing.e_native.clone(),
            call_counts: timing
                .call_counts
                .iter()
                .map(|(k, v)| (k.as_str().to_owned(), *v))
                .collect(),
            overhead_percent: overhead_percent(e.mean, timing.e_native.mean)?,
            cps: cps(&timing.call_counts, timing.duration)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
