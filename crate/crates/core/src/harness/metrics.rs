//! Overhead and call-rate metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shim::CallName;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum MetricsError {
    #[error("division by zero: {0} must be positive")]
    DivisionByZero(&'static str),
}

/// Relative slowdown in percent: `(e - e_native) / e_native * 100`.
/// Negative values are legal (measurement noise can make the instrumented
/// run faster).
pub fn overhead_percent(e: f64, e_native: f64) -> Result<f64, MetricsError> {
    if e_native <= 0.0 {
        return Err(MetricsError::DivisionByZero("e_native"));
    }
    Ok((e - e_native) / e_native * 100.0)
}

/// Each kernel launch counts as three runtime calls (configure, setup
/// arguments, launch), every other call as one.
pub fn weighted_calls(call_counts: &BTreeMap<CallName, u64>) -> u64 {
    call_counts
        .iter()
        .map(|(&name, &n)| if name == CallName::LaunchKernel { 3 * n } else { n })
        .sum()
}

/// Runtime calls per second of native execution.
pub fn cps(call_counts: &BTreeMap<CallName, u64>, duration: f64) -> Result<f64, MetricsError> {
    cps_from_total(weighted_calls(call_counts), duration)
}

pub fn cps_from_total(total_calls: u64, duration: f64) -> Result<f64, MetricsError> {
    if duration <= 0.0 {
        return Err(MetricsError::DivisionByZero("duration"));
    }
    Ok(total_calls as f64 / duration)
}

/// Mean and sample standard deviation of repeated measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub samples: Vec<f64>,
}

impl Stats {
    pub fn of(samples: Vec<f64>) -> Self {
        let n = samples.len() as f64;
        let mean = if samples.is_empty() {
            0.0
        } else {
            samples.iter().sum::<f64>() / n
        };
        let std = if samples.len() < 2 {
            0.0
        } else {
            (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std, samples }
    }
}

/// Wall times of one workload under the three execution modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub e_native: Stats,
    pub e_direct: Stats,
    pub e_proxy: Stats,
    pub call_counts: BTreeMap<CallName, u64>,
    /// Native duration used for the call rate.
    pub duration: f64,
    pub threads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overhead_percent: f64,
    pub proxy_overhead_percent: f64,
    pub cps: f64,
    pub total_calls: u64,
}

impl TimingReport {
    pub fn metrics(&self) -> Result<MetricsReport, MetricsError> {
        Ok(MetricsReport {
            overhead_percent: overhead_percent(self.e_direct.mean, self.e_native.mean)?,
            proxy_overhead_percent: overhead_percent(self.e_proxy.mean, self.e_native.mean)?,
            cps: cps(&self.call_counts, self.duration)?,
            total_calls: weighted_calls(&self.call_counts),
        })
    }
}
