//! Per-trace execution telemetry.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::trace::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Completed,
    Cancelled,
    Disconnected,
    Timeout,
    ServerError,
}

impl RequestStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RequestStatus::Completed => "completed",
            RequestStatus::Cancelled => "cancelled",
            RequestStatus::Disconnected => "disconnected",
            RequestStatus::Timeout => "timeout",
            RequestStatus::ServerError => "server_error",
        }
    }
}

impl fmt::Display for RequestStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: Token,
    pub logprob: f64,
}

/// Top-N candidates at one generated position, sorted by descending logprob.
pub type PositionLogprobs = Vec<TokenLogprob>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub request_id: String,
    pub status: RequestStatus,
    /// Offset the trace asked for.
    pub intended_ms: u64,
    /// Offset at which the client actually dispatched the request.
    pub dispatch_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttft_ms: Option<u64>,
    pub total_ms: u64,
    /// One token sequence per completion.
    pub output_tokens: Vec<Vec<Token>>,
    /// Per completion, per position top-N lists; present iff requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_records: Option<Vec<Vec<PositionLogprobs>>>,
    /// Trace-relative times at which this request received tokens.
    #[serde(default)]
    pub token_times_ms: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_detail: Option<String>,
}

impl RequestOutcome {
    pub fn pending(request_id: &str, intended_ms: u64, dispatch_ms: u64, n: usize) -> Self {
        Self {
            request_id: request_id.to_string(),
            status: RequestStatus::ServerError,
            intended_ms,
            dispatch_ms,
            ttft_ms: None,
            total_ms: 0,
            output_tokens: vec![Vec::new(); n.max(1)],
            logprob_records: None,
            token_times_ms: Vec::new(),
            error_detail: None,
        }
    }

    pub fn end_ms(&self) -> u64 {
        self.dispatch_ms + self.total_ms
    }

    pub fn tokens_received(&self) -> usize {
        self.output_tokens.iter().map(Vec::len).sum()
    }

    pub fn primary_tokens(&self) -> &[Token] {
        self.output_tokens.first().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvEventKind {
    Alloc,
    Free,
    PrefixHit,
    Evict,
    Reuse,
}

impl KvEventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            KvEventKind::Alloc => "alloc",
            KvEventKind::Free => "free",
            KvEventKind::PrefixHit => "prefix_hit",
            KvEventKind::Evict => "evict",
            KvEventKind::Reuse => "reuse",
        }
    }
}

/// One record of the out-of-band KV block lifecycle stream.
///
/// `alloc` takes a block out of the free pool for new content, `prefix_hit`
/// attaches a request to a block another request currently holds, `reuse`
/// revives a cached block from the free pool, `free` returns a block to the
/// pool when its last holder releases it (its hash stays cached), and
/// `evict` discards a pooled block's cached hash so it can be reallocated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvEvent {
    pub ts: u64,
    pub kind: KvEventKind,
    pub block_id: u32,
    pub block_hash: u64,
    pub owner_request_id: String,
    pub adapter: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashEvidence {
    pub at_ms: u64,
    pub detail: String,
    /// Scheduler log lines leading up to the crash.
    #[serde(default)]
    pub recent_log: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub trace_id: String,
    pub outcomes: Vec<RequestOutcome>,
    pub kv_events: Vec<KvEvent>,
    /// False when the engine exposes no KV stream.
    pub kv_stream_available: bool,
    pub server_crashed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crash: Option<CrashEvidence>,
    pub wall_clock_span_ms: u64,
    /// Offset at which the last request reached a terminal state.
    pub last_terminal_ms: u64,
    /// Set when some Send missed its dispatch tolerance.
    pub schedule_degraded: bool,
    #[serde(default)]
    pub annotations: BTreeMap<String, String>,
}

impl ExecutionReport {
    pub fn outcome(&self, request_id: &str) -> Option<&RequestOutcome> {
        self.outcomes.iter().find(|o| o.request_id == request_id)
    }

    /// Largest number of blocks held at once according to the KV stream.
    pub fn kv_peak_held(&self) -> usize {
        let mut held: i64 = 0;
        let mut peak: i64 = 0;
        for ev in &self.kv_events {
            match ev.kind {
                KvEventKind::Alloc | KvEventKind::Reuse => held += 1,
                KvEventKind::Free => held -= 1,
                _ => {}
            }
            peak = peak.max(held);
        }
        peak.max(0) as usize
    }

    /// Largest number of requests in flight at the same instant.
    pub fn peak_in_flight(&self) -> usize {
        let mut edges: Vec<(u64, i32)> = Vec::new();
        for o in self.outcomes.iter().filter(|o| o.total_ms > 0) {
            edges.push((o.dispatch_ms, 1));
            edges.push((o.end_ms(), -1));
        }
        // Ends sort before starts at equal instants.
        edges.sort();
        let mut cur = 0i32;
        let mut peak = 0i32;
        for (_, d) in edges {
            cur += d;
            peak = peak.max(cur);
        }
        peak.max(0) as usize
    }
}
