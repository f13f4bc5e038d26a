//! Trace pressure score, a reporting metric that never steers the search.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::report::ExecutionReport;
use crate::trace::TimedTrace;

pub const SEND_NORM: f64 = 20.0;
pub const ADAPTER_NORM: f64 = 6.0;
pub const KV_NORM: f64 = 1500.0;
pub const SHAPE_NORM: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressureScore {
    pub s_total: f64,
    pub burst: f64,
    pub multi_adapter: f64,
    pub kv_pressure: f64,
    pub shape_diversity: f64,
    pub n_send: u64,
    pub n_adapter: u64,
    pub n_kv: u64,
    pub n_shape: u64,
}

pub fn score_pressure(n_send: u64, n_adapter: u64, n_kv: u64, n_shape: u64) -> PressureScore {
    let burst = n_send as f64 / SEND_NORM;
    let multi_adapter = n_adapter as f64 / ADAPTER_NORM;
    let kv_pressure = n_kv as f64 / KV_NORM;
    let shape_diversity = n_shape as f64 / SHAPE_NORM;
    PressureScore {
        s_total: burst + multi_adapter + kv_pressure + shape_diversity,
        burst,
        multi_adapter,
        kv_pressure,
        shape_diversity,
        n_send,
        n_adapter,
        n_kv,
        n_shape,
    }
}

/// Counters from one execution: peak concurrent requests, adapters that
/// reached the engine, peak held KV blocks and distinct prompt lengths.
pub fn pressure_of(trace: &TimedTrace, report: &ExecutionReport) -> PressureScore {
    let admitted = |id: &str| {
        report
            .outcome(id)
            .is_some_and(|o| o.total_ms > 0 || o.tokens_received() > 0)
    };
    let adapters: BTreeSet<&str> = trace
        .sends()
        .filter(|s| admitted(&s.request_id))
        .map(|s| s.adapter_name())
        .collect();
    let shapes: BTreeSet<u32> = trace.sends().map(|s| s.shape.prompt_len).collect();
    score_pressure(
        report.peak_in_flight() as u64,
        adapters.len() as u64,
        report.kv_peak_held() as u64,
        shapes.len() as u64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizers() {
        assert!((score_pressure(20, 6, 1500, 6).s_total - 4.0).abs() < 1e-9);
        assert_eq!(score_pressure(0, 0, 0, 0).s_total, 0.0);
        assert!((score_pressure(10, 0, 0, 0).s_total - 0.5).abs() < 1e-12);
    }
}
