//! Stage-1 behavioral checks and structural KV forensics.
//!
//! Every check is a pure function of its inputs. Anomalies come out as
//! [`Suspicion`] records whose fingerprint hashes the kind plus a normalized
//! form of the evidence, so the same defect seen through different traces
//! collides.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::report::{ExecutionReport, KvEventKind, RequestOutcome, RequestStatus};
use crate::trace::{EventAction, PromptShape, TimedTrace, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuspicionKind {
    Timeout,
    Stall,
    TtftRegression,
    LifecycleViolation,
    CorruptedOutput,
    KvLeak,
    CrossAdapterReuse,
    HashConflict,
    SnapshotDivergence,
    Crash,
}

impl SuspicionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SuspicionKind::Timeout => "timeout",
            SuspicionKind::Stall => "stall",
            SuspicionKind::TtftRegression => "ttft_regression",
            SuspicionKind::LifecycleViolation => "lifecycle_violation",
            SuspicionKind::CorruptedOutput => "corrupted_output",
            SuspicionKind::KvLeak => "kv_leak",
            SuspicionKind::CrossAdapterReuse => "cross_adapter_reuse",
            SuspicionKind::HashConflict => "hash_conflict",
            SuspicionKind::SnapshotDivergence => "snapshot_divergence",
            SuspicionKind::Crash => "crash",
        }
    }

    pub fn is_timing(&self) -> bool {
        matches!(self, SuspicionKind::Stall | SuspicionKind::TtftRegression)
    }

    /// Kinds that indicate one request observed another's state.
    pub fn is_state_corruption(&self) -> bool {
        matches!(
            self,
            SuspicionKind::CorruptedOutput
                | SuspicionKind::CrossAdapterReuse
                | SuspicionKind::HashConflict
        )
    }
}

impl fmt::Display for SuspicionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleRule {
    CompletedAfterCancel,
    StreamedAfterDisconnect,
    SpuriousCancel,
    SpuriousDisconnect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionReason {
    EmptyCompletion,
    ExceedsMaxTokens,
    UndecodableToken,
}

/// One block-table anomaly seen in the KV stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockIncident {
    pub ts: u64,
    pub block_id: u32,
    pub expected_hash: u64,
    pub resident_hash: u64,
    pub owner_request_id: String,
    pub owner_adapter: String,
    pub reuser_request_id: String,
    pub reuser_adapter: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "evidence", rename_all = "snake_case")]
pub enum Evidence {
    Timeout {
        request_ids: Vec<String>,
    },
    Stall {
        start_ms: u64,
        end_ms: u64,
        in_flight: Vec<String>,
    },
    TtftRegression {
        request_ids: Vec<String>,
        worst_ttft_ms: u64,
        baseline_p50_ms: f64,
        amplification: f64,
        factor: f64,
    },
    Lifecycle {
        request_id: String,
        rule: LifecycleRule,
        status: RequestStatus,
    },
    StructuralCorruption {
        request_id: String,
        reason: CorruptionReason,
    },
    /// Requests with the same prompt identity, shape, adapter and
    /// deterministic sampling produced different tokens.
    RelationalDivergence {
        identity: String,
        shape: PromptShape,
        adapter: String,
        reference: String,
        /// Reference output as observed, so confirmation can judge it too.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        reference_tokens: Vec<Token>,
        divergent: Vec<String>,
        position: usize,
    },
    KvLeak {
        blocks: Vec<u32>,
        owners: Vec<String>,
        owner_statuses: Vec<RequestStatus>,
    },
    BlockReuse {
        incidents: Vec<BlockIncident>,
    },
    SnapshotDivergence {
        request_ids: Vec<String>,
        runs: usize,
    },
    Crash {
        at_ms: u64,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suspicion {
    pub trace_id: String,
    pub kind: SuspicionKind,
    pub evidence: Evidence,
    pub fingerprint: String,
    pub severity_hint: Severity,
    /// Requests whose outputs or latencies carry the anomaly.
    pub affected_requests: Vec<String>,
}

impl Suspicion {
    pub fn new(
        trace_id: &str,
        kind: SuspicionKind,
        evidence: Evidence,
        mut affected: Vec<String>,
    ) -> Self {
        affected.sort();
        affected.dedup();
        Self {
            trace_id: trace_id.to_string(),
            fingerprint: fingerprint(kind, &evidence),
            severity_hint: severity_of(kind),
            kind,
            evidence,
            affected_requests: affected,
        }
    }
}

fn severity_of(kind: SuspicionKind) -> Severity {
    use SuspicionKind::*;
    match kind {
        Crash | CrossAdapterReuse | HashConflict | CorruptedOutput => Severity::High,
        Stall | TtftRegression | Timeout | KvLeak => Severity::Medium,
        LifecycleViolation | SnapshotDivergence => Severity::Low,
    }
}

/// Replaces every digit run with `#`, so tick numbers and ids drop out.
pub fn normalize_detail(detail: &str) -> String {
    let mut out = String::with_capacity(detail.len());
    let mut in_digits = false;
    for c in detail.chars() {
        if c.is_ascii_digit() {
            if !in_digits {
                out.push('#');
            }
            in_digits = true;
        } else {
            out.push(c);
            in_digits = false;
        }
    }
    out
}

/// Stable dedup key: kind plus the parts of the evidence that identify the
/// defect rather than the particular trace that exposed it.
pub fn fingerprint(kind: SuspicionKind, evidence: &Evidence) -> String {
    let signature: Vec<String> = match evidence {
        Evidence::Lifecycle { rule, .. } => vec![format!("{rule:?}")],
        Evidence::StructuralCorruption { reason, .. } => vec![format!("{reason:?}")],
        Evidence::RelationalDivergence { .. } => vec!["relational".into()],
        Evidence::KvLeak { owner_statuses, .. } => {
            let set: BTreeSet<_> = owner_statuses.iter().map(|s| s.as_str()).collect();
            set.into_iter().map(str::to_string).collect()
        }
        Evidence::BlockReuse { incidents } => {
            let pairs: BTreeSet<String> = incidents
                .iter()
                .map(|i| {
                    if i.owner_adapter == i.reuser_adapter {
                        "same-adapter".to_string()
                    } else {
                        let mut p = [i.owner_adapter.as_str(), i.reuser_adapter.as_str()];
                        p.sort();
                        format!("{}|{}", p[0], p[1])
                    }
                })
                .collect();
            pairs.into_iter().collect()
        }
        Evidence::Crash { detail, .. } => vec![normalize_detail(detail)],
        Evidence::Timeout { .. }
        | Evidence::Stall { .. }
        | Evidence::TtftRegression { .. }
        | Evidence::SnapshotDivergence { .. } => Vec::new(),
    };
    let mut h = Sha256::new();
    h.update(kind.as_str().as_bytes());
    for part in signature {
        h.update([0u8]);
        h.update(part.as_bytes());
    }
    let digest = h.finalize();
    digest[..12].iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Baseline and thresholds

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub ttft_factor: f64,
    pub stall_window_ms: u64,
    pub kv_grace_ms: u64,
    pub min_baseline_samples: usize,
    /// Token ids at or above this are undecodable; unchecked when absent.
    pub vocab_size: Option<u32>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            ttft_factor: 10.0,
            stall_window_ms: 10_000,
            kv_grace_ms: 2_000,
            min_baseline_samples: 50,
            vocab_size: None,
        }
    }
}

/// Rolling TTFT samples from recent non-suspect executions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    capacity: usize,
    samples: VecDeque<u64>,
}

impl Default for BaselineStats {
    fn default() -> Self {
        Self::with_capacity(1024)
    }
}

impl BaselineStats {
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            samples: VecDeque::new(),
        }
    }

    pub fn push(&mut self, ttft_ms: u64) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(ttft_ms);
    }

    /// Adds every first-token latency from a report with trustworthy timing.
    pub fn absorb(&mut self, report: &ExecutionReport) {
        if report.schedule_degraded || report.server_crashed {
            return;
        }
        for o in &report.outcomes {
            if let Some(t) = o.ttft_ms {
                self.push(t);
            }
        }
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    /// Nearest-rank quantile.
    pub fn quantile(&self, q: f64) -> Option<f64> {
        if self.samples.is_empty() {
            return None;
        }
        let mut v: Vec<u64> = self.samples.iter().copied().collect();
        v.sort_unstable();
        let rank = ((q.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize).clamp(1, v.len());
        Some(v[rank - 1] as f64)
    }

    pub fn p50(&self) -> Option<f64> {
        self.quantile(0.50)
    }

    pub fn p95(&self) -> Option<f64> {
        self.quantile(0.95)
    }

    pub fn p99(&self) -> Option<f64> {
        self.quantile(0.99)
    }
}

// ---------------------------------------------------------------------------
// Behavioral checks

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BehavioralReport {
    pub suspicions: Vec<Suspicion>,
    /// The TTFT regression check did not run (baseline too small or
    /// unreliable dispatch timing).
    pub ttft_check_skipped: bool,
}

pub fn behavioral_check(
    trace: &TimedTrace,
    report: &ExecutionReport,
    baseline: &BaselineStats,
    thresholds: &Thresholds,
) -> BehavioralReport {
    let id = report.trace_id.as_str();
    let mut out = BehavioralReport::default();

    if let Some(crash) = &report.crash {
        out.suspicions.push(Suspicion::new(
            id,
            SuspicionKind::Crash,
            Evidence::Crash {
                at_ms: crash.at_ms,
                detail: crash.detail.clone(),
            },
            report
                .outcomes
                .iter()
                .filter(|o| o.status == RequestStatus::ServerError)
                .map(|o| o.request_id.clone())
                .collect(),
        ));
    } else if report.server_crashed {
        out.suspicions.push(Suspicion::new(
            id,
            SuspicionKind::Crash,
            Evidence::Crash {
                at_ms: report.last_terminal_ms,
                detail: "server lost".into(),
            },
            Vec::new(),
        ));
    }

    let timed_out: Vec<String> = report
        .outcomes
        .iter()
        .filter(|o| o.status == RequestStatus::Timeout)
        .map(|o| o.request_id.clone())
        .collect();
    if !timed_out.is_empty() {
        out.suspicions.push(Suspicion::new(
            id,
            SuspicionKind::Timeout,
            Evidence::Timeout {
                request_ids: timed_out.clone(),
            },
            timed_out,
        ));
    }

    if let Some(s) = detect_stall(report, thresholds.stall_window_ms) {
        out.suspicions.push(s);
    }

    match ttft_regression(report, baseline, thresholds) {
        Some(found) => out.suspicions.extend(found),
        None => out.ttft_check_skipped = true,
    }

    out.suspicions.extend(lifecycle_check(trace, report));
    out.suspicions
        .extend(structural_corruption(trace, report, thresholds));
    out.suspicions.extend(kv_leak(report, thresholds));
    out
}

/// `None` when the check cannot run.
fn ttft_regression(
    report: &ExecutionReport,
    baseline: &BaselineStats,
    thresholds: &Thresholds,
) -> Option<Option<Suspicion>> {
    if baseline.count() < thresholds.min_baseline_samples || report.schedule_degraded {
        return None;
    }
    let p50 = baseline.p50()?.max(1.0);
    let limit = thresholds.ttft_factor * p50;
    let mut slow: Vec<(&RequestOutcome, u64)> = report
        .outcomes
        .iter()
        .filter_map(|o| o.ttft_ms.map(|t| (o, t)))
        .filter(|(_, t)| *t as f64 > limit)
        .collect();
    if slow.is_empty() {
        return Some(None);
    }
    slow.sort_by_key(|(o, t)| (std::cmp::Reverse(*t), o.request_id.clone()));
    let worst = slow[0].1;
    let ids: Vec<String> = slow.iter().map(|(o, _)| o.request_id.clone()).collect();
    Some(Some(Suspicion::new(
        &report.trace_id,
        SuspicionKind::TtftRegression,
        Evidence::TtftRegression {
            request_ids: ids.clone(),
            worst_ttft_ms: worst,
            baseline_p50_ms: p50,
            amplification: worst as f64 / p50,
            factor: thresholds.ttft_factor,
        },
        ids,
    )))
}

/// Flags the first interval of at least `stall_window_ms` during which some
/// request is in flight, the server is alive, and no request receives a token.
///
/// Requests whose tokens all arrived in one burst (unary responses) are left
/// out, since their progress cannot be observed.
pub fn detect_stall(report: &ExecutionReport, stall_window_ms: u64) -> Option<Suspicion> {
    let alive_until = report.crash.as_ref().map(|c| c.at_ms).unwrap_or(u64::MAX);
    let observable = |o: &&RequestOutcome| {
        o.total_ms > 0
            && !(o.token_times_ms.len() == 1 && o.tokens_received() > o.output_tokens.len())
    };
    let mut intervals: Vec<(u64, u64, &str)> = report
        .outcomes
        .iter()
        .filter(observable)
        .map(|o| {
            (
                o.dispatch_ms,
                o.end_ms().min(alive_until),
                o.request_id.as_str(),
            )
        })
        .filter(|(s, e, _)| e > s)
        .collect();
    if intervals.is_empty() {
        return None;
    }
    intervals.sort();
    let mut progress: Vec<u64> = report
        .outcomes
        .iter()
        .flat_map(|o| o.token_times_ms.iter().copied())
        .collect();
    progress.sort_unstable();
    progress.dedup();

    let mut i = 0;
    while i < intervals.len() {
        let (s, mut e, _) = intervals[i];
        let mut j = i + 1;
        while j < intervals.len() && intervals[j].0 <= e {
            e = e.max(intervals[j].1);
            j += 1;
        }
        let mut prev = s;
        let checkpoints = progress
            .iter()
            .copied()
            .filter(|t| *t > s && *t <= e)
            .chain(std::iter::once(e));
        for t in checkpoints {
            if t.saturating_sub(prev) >= stall_window_ms {
                let in_flight: Vec<String> = intervals[i..j]
                    .iter()
                    .filter(|(a, b, _)| *a < t && *b > prev)
                    .map(|(_, _, id)| id.to_string())
                    .collect();
                return Some(Suspicion::new(
                    &report.trace_id,
                    SuspicionKind::Stall,
                    Evidence::Stall {
                        start_ms: prev,
                        end_ms: t,
                        in_flight: in_flight.clone(),
                    },
                    in_flight,
                ));
            }
            prev = prev.max(t);
        }
        i = j;
    }
    None
}

/// Checks outcomes against the Cancel/Disconnect events in the trace.
pub fn lifecycle_check(trace: &TimedTrace, report: &ExecutionReport) -> Vec<Suspicion> {
    let mut cancels: HashMap<&str, u64> = HashMap::new();
    let mut disconnects: HashMap<&str, u64> = HashMap::new();
    for e in &trace.events {
        match &e.action {
            EventAction::Cancel { target } => {
                cancels.entry(target.as_str()).or_insert(e.offset_ms);
            }
            EventAction::Disconnect { target } => {
                disconnects.entry(target.as_str()).or_insert(e.offset_ms);
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    for o in &report.outcomes {
        let id = o.request_id.as_str();
        let cancel_at = cancels.get(id).copied();
        let disconnect_at = disconnects.get(id).copied();
        let first_control = cancel_at.into_iter().chain(disconnect_at).min();
        let rule = match o.status {
            RequestStatus::Completed => match first_control {
                Some(at) if o.end_ms() > at => {
                    if cancel_at == Some(at) {
                        Some(LifecycleRule::CompletedAfterCancel)
                    } else {
                        Some(LifecycleRule::StreamedAfterDisconnect)
                    }
                }
                _ => None,
            },
            RequestStatus::Cancelled if cancel_at.is_none() => Some(LifecycleRule::SpuriousCancel),
            RequestStatus::Disconnected if disconnect_at.is_none() => {
                Some(LifecycleRule::SpuriousDisconnect)
            }
            _ => match disconnect_at {
                Some(at) if o.token_times_ms.iter().any(|t| *t > at) => {
                    Some(LifecycleRule::StreamedAfterDisconnect)
                }
                _ => None,
            },
        };
        if let Some(rule) = rule {
            out.push(Suspicion::new(
                &report.trace_id,
                SuspicionKind::LifecycleViolation,
                Evidence::Lifecycle {
                    request_id: o.request_id.clone(),
                    rule,
                    status: o.status,
                },
                vec![o.request_id.clone()],
            ));
        }
    }
    out
}

/// Cheap, model-agnostic output checks: empty completed bodies, too many
/// tokens, token ids outside the vocabulary.
fn structural_corruption(
    trace: &TimedTrace,
    report: &ExecutionReport,
    thresholds: &Thresholds,
) -> Vec<Suspicion> {
    let mut out = Vec::new();
    for o in &report.outcomes {
        let Some(spec) = trace.find_send(&o.request_id) else {
            continue;
        };
        let max = spec.sampling.max_tokens as usize;
        let reason =
            if o.status == RequestStatus::Completed && o.output_tokens.iter().any(Vec::is_empty) {
                Some(CorruptionReason::EmptyCompletion)
            } else if o.output_tokens.iter().any(|c| c.len() > max) {
                Some(CorruptionReason::ExceedsMaxTokens)
            } else if thresholds
                .vocab_size
                .is_some_and(|v| o.output_tokens.iter().flatten().any(|t| *t >= v))
            {
                Some(CorruptionReason::UndecodableToken)
            } else {
                None
            };
        if let Some(reason) = reason {
            out.push(Suspicion::new(
                &report.trace_id,
                SuspicionKind::CorruptedOutput,
                Evidence::StructuralCorruption {
                    request_id: o.request_id.clone(),
                    reason,
                },
                vec![o.request_id.clone()],
            ));
        }
    }
    out
}

/// Blocks still held once every request has ended and the grace period has
/// passed.
fn kv_leak(report: &ExecutionReport, thresholds: &Thresholds) -> Option<Suspicion> {
    if !report.kv_stream_available || report.server_crashed {
        return None;
    }
    let horizon = report.last_terminal_ms + thresholds.kv_grace_ms;
    let mut held: BTreeMap<u32, String> = BTreeMap::new();
    for ev in report.kv_events.iter().filter(|e| e.ts <= horizon) {
        match ev.kind {
            KvEventKind::Alloc | KvEventKind::Reuse => {
                held.insert(ev.block_id, ev.owner_request_id.clone());
            }
            KvEventKind::Free => {
                held.remove(&ev.block_id);
            }
            _ => {}
        }
    }
    if held.is_empty() {
        return None;
    }
    let owners: BTreeSet<String> = held.values().cloned().collect();
    let statuses: BTreeSet<RequestStatus> = owners
        .iter()
        .filter_map(|o| report.outcome(o))
        .map(|o| o.status)
        .collect();
    let owners: Vec<String> = owners.into_iter().collect();
    Some(Suspicion::new(
        &report.trace_id,
        SuspicionKind::KvLeak,
        Evidence::KvLeak {
            blocks: held.keys().copied().collect(),
            owners: owners.clone(),
            owner_statuses: statuses.into_iter().collect(),
        },
        owners,
    ))
}

// ---------------------------------------------------------------------------
// Relational consistency

/// Requests that must produce identical tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationalKey {
    pub identity: String,
    pub shape: PromptShape,
    pub adapter: String,
}

fn common_prefix_divergence(a: &[Token], b: &[Token]) -> Option<usize> {
    a.iter().zip(b).position(|(x, y)| x != y)
}

fn relational_members<'a>(
    trace: &'a TimedTrace,
    report: &'a ExecutionReport,
) -> BTreeMap<RelationalKey, Vec<(&'a str, &'a [Token])>> {
    let mut groups: BTreeMap<RelationalKey, Vec<(&str, &[Token])>> = BTreeMap::new();
    for spec in trace.sends() {
        if !spec.sampling.is_deterministic() {
            continue;
        }
        let Some(o) = report.outcome(&spec.request_id) else {
            continue;
        };
        let tokens = o.primary_tokens();
        if tokens.is_empty() {
            continue;
        }
        groups
            .entry(RelationalKey {
                identity: spec.prompt_identity().to_string(),
                shape: spec.shape,
                adapter: spec.adapter_name().to_string(),
            })
            .or_default()
            .push((spec.request_id.as_str(), tokens));
    }
    groups
}

/// Same identity, shape, adapter and deterministic sampling must give the
/// same tokens (up to the shorter length). One suspicion per divergent group.
pub fn relational_check(trace: &TimedTrace, report: &ExecutionReport) -> Vec<Suspicion> {
    let mut out = Vec::new();
    for (key, members) in relational_members(trace, report) {
        let (ref_id, ref_tokens) = members[0];
        let mut divergent = Vec::new();
        let mut first = usize::MAX;
        for (id, tokens) in &members[1..] {
            if let Some(p) = common_prefix_divergence(ref_tokens, tokens) {
                divergent.push(id.to_string());
                first = first.min(p);
            }
        }
        if divergent.is_empty() {
            continue;
        }
        let mut affected = divergent.clone();
        affected.push(ref_id.to_string());
        out.push(Suspicion::new(
            &report.trace_id,
            SuspicionKind::CorruptedOutput,
            Evidence::RelationalDivergence {
                identity: key.identity,
                shape: key.shape,
                adapter: key.adapter,
                reference: ref_id.to_string(),
                reference_tokens: ref_tokens.to_vec(),
                divergent,
                position: first,
            },
            affected,
        ));
    }
    out
}

/// Reference outputs from earlier clean executions, for cross-run checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputLedger {
    entries: BTreeMap<String, LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LedgerEntry {
    tokens: Vec<Token>,
    source: String,
}

fn ledger_key(key: &RelationalKey) -> String {
    format!(
        "{}|{}|{}|{}",
        key.identity, key.shape.prefix_len, key.shape.prompt_len, key.adapter
    )
}

impl OutputLedger {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Compares this run's deterministic outputs with recorded references.
    pub fn check(&self, trace: &TimedTrace, report: &ExecutionReport) -> Vec<Suspicion> {
        let mut out = Vec::new();
        for (key, members) in relational_members(trace, report) {
            let Some(entry) = self.entries.get(&ledger_key(&key)) else {
                continue;
            };
            let mut divergent = Vec::new();
            let mut first = usize::MAX;
            for (id, tokens) in &members {
                if let Some(p) = common_prefix_divergence(&entry.tokens, tokens) {
                    divergent.push(id.to_string());
                    first = first.min(p);
                }
            }
            if divergent.is_empty() {
                continue;
            }
            out.push(Suspicion::new(
                &report.trace_id,
                SuspicionKind::CorruptedOutput,
                Evidence::RelationalDivergence {
                    identity: key.identity,
                    shape: key.shape,
                    adapter: key.adapter,
                    reference: entry.source.clone(),
                    reference_tokens: entry.tokens.clone(),
                    divergent: divergent.clone(),
                    position: first,
                },
                divergent,
            ));
        }
        out
    }

    /// Records outputs from a run that raised no suspicion. Longer outputs
    /// replace shorter references.
    pub fn record(&mut self, trace: &TimedTrace, report: &ExecutionReport) {
        for (key, members) in relational_members(trace, report) {
            let (id, tokens) = members
                .iter()
                .max_by_key(|(_, t)| t.len())
                .copied()
                .expect("groups are non-empty");
            let k = ledger_key(&key);
            let longer = self
                .entries
                .get(&k)
                .is_none_or(|e| e.tokens.len() < tokens.len());
            if longer {
                self.entries.insert(
                    k,
                    LedgerEntry {
                        tokens: tokens.to_vec(),
                        source: format!("{}/{}", report.trace_id, id),
                    },
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Structural forensics

/// Block-table anomalies in the KV stream.
///
/// A reuse or prefix hit names the content hash the requester looked up. If
/// the block's latest allocation stored different content, the requester got
/// someone else's KV: `cross_adapter_reuse` when the adapters differ,
/// `hash_conflict` otherwise. No-op when the stream is unavailable.
pub fn structural_forensics(report: &ExecutionReport) -> Vec<Suspicion> {
    if !report.kv_stream_available || report.kv_events.is_empty() {
        return Vec::new();
    }
    struct Resident<'a> {
        hash: u64,
        adapter: &'a str,
        owner: &'a str,
    }
    let mut resident: HashMap<u32, Resident> = HashMap::new();
    let mut cross = Vec::new();
    let mut conflict = Vec::new();
    for ev in &report.kv_events {
        match ev.kind {
            KvEventKind::Alloc => {
                resident.insert(
                    ev.block_id,
                    Resident {
                        hash: ev.block_hash,
                        adapter: &ev.adapter,
                        owner: &ev.owner_request_id,
                    },
                );
            }
            KvEventKind::PrefixHit | KvEventKind::Reuse => {
                let Some(r) = resident.get(&ev.block_id) else {
                    continue;
                };
                if r.hash == ev.block_hash && r.adapter == ev.adapter {
                    continue;
                }
                let incident = BlockIncident {
                    ts: ev.ts,
                    block_id: ev.block_id,
                    expected_hash: ev.block_hash,
                    resident_hash: r.hash,
                    owner_request_id: r.owner.to_string(),
                    owner_adapter: r.adapter.to_string(),
                    reuser_request_id: ev.owner_request_id.clone(),
                    reuser_adapter: ev.adapter.clone(),
                };
                if r.adapter != ev.adapter {
                    cross.push(incident);
                } else {
                    conflict.push(incident);
                }
            }
            KvEventKind::Free | KvEventKind::Evict => {}
        }
    }
    let mut out = Vec::new();
    for (kind, incidents) in [
        (SuspicionKind::CrossAdapterReuse, cross),
        (SuspicionKind::HashConflict, conflict),
    ] {
        if incidents.is_empty() {
            continue;
        }
        let affected = incidents
            .iter()
            .map(|i| i.reuser_request_id.clone())
            .collect();
        out.push(Suspicion::new(
            &report.trace_id,
            kind,
            Evidence::BlockReuse { incidents },
            affected,
        ));
    }
    out
}

/// Per-request block content across runs of the same trace.
///
/// For each request, the multiset of block hashes it allocated or attached
/// must match across runs; any difference is a snapshot divergence.
pub fn snapshot_divergence(runs: &[&ExecutionReport]) -> Option<Suspicion> {
    if runs.len() < 2 || runs.iter().any(|r| !r.kv_stream_available) {
        return None;
    }
    let snapshot = |r: &ExecutionReport| {
        let mut per: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for ev in &r.kv_events {
            if matches!(
                ev.kind,
                KvEventKind::Alloc | KvEventKind::Reuse | KvEventKind::PrefixHit
            ) {
                per.entry(ev.owner_request_id.clone())
                    .or_default()
                    .push(ev.block_hash);
            }
        }
        for v in per.values_mut() {
            v.sort_unstable();
        }
        per
    };
    let first = snapshot(runs[0]);
    let mut differing: BTreeSet<String> = BTreeSet::new();
    for r in &runs[1..] {
        let other = snapshot(r);
        for id in first.keys().chain(other.keys()) {
            if first.get(id) != other.get(id) {
                differing.insert(id.clone());
            }
        }
    }
    if differing.is_empty() {
        return None;
    }
    let ids: Vec<String> = differing.into_iter().collect();
    Some(Suspicion::new(
        &runs[0].trace_id,
        SuspicionKind::SnapshotDivergence,
        Evidence::SnapshotDivergence {
            request_ids: ids.clone(),
            runs: runs.len(),
        },
        ids,
    ))
}

/// Every oracle over one execution, in a fixed order.
pub fn evaluate(
    trace: &TimedTrace,
    report: &ExecutionReport,
    baseline: &BaselineStats,
    thresholds: &Thresholds,
    ledger: Option<&OutputLedger>,
) -> BehavioralReport {
    let mut out = behavioral_check(trace, report, baseline, thresholds);
    out.suspicions.extend(structural_forensics(report));
    out.suspicions.extend(relational_check(trace, report));
    if let Some(ledger) = ledger {
        out.suspicions.extend(ledger.check(trace, report));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::{KvEvent, RequestOutcome};

    fn outcome(
        id: &str,
        status: RequestStatus,
        dispatch: u64,
        total: u64,
        times: Vec<u64>,
    ) -> RequestOutcome {
        let mut o = RequestOutcome::pending(id, dispatch, dispatch, 1);
        o.status = status;
        o.total_ms = total;
        o.output_tokens = vec![times.iter().map(|t| *t as Token % 7).collect()];
        o.ttft_ms = times.first().map(|t| t - dispatch);
        o.token_times_ms = times;
        o
    }

    fn report(outcomes: Vec<RequestOutcome>) -> ExecutionReport {
        ExecutionReport {
            trace_id: "t".into(),
            last_terminal_ms: outcomes
                .iter()
                .map(RequestOutcome::end_ms)
                .max()
                .unwrap_or(0),
            outcomes,
            kv_events: Vec::new(),
            kv_stream_available: true,
            server_crashed: false,
            crash: None,
            wall_clock_span_ms: 0,
            schedule_degraded: false,
            annotations: BTreeMap::new(),
        }
    }

    fn kv(
        ts: u64,
        kind: KvEventKind,
        block: u32,
        hash: u64,
        owner: &str,
        adapter: &str,
    ) -> KvEvent {
        KvEvent {
            ts,
            kind,
            block_id: block,
            block_hash: hash,
            owner_request_id: owner.into(),
            adapter: adapter.into(),
        }
    }

    #[test]
    fn quantiles_are_monotone() {
        let mut b = BaselineStats::default();
        for t in [5, 9, 1, 30, 12, 7, 7, 100] {
            b.push(t);
        }
        let (p50, p95, p99) = (b.p50().unwrap(), b.p95().unwrap(), b.p99().unwrap());
        assert!(p50 <= p95 && p95 <= p99);
        assert_eq!(p50, 7.0);
    }

    #[test]
    fn progress_defeats_stall() {
        let times: Vec<u64> = (1..=30).map(|s| s * 1000).collect();
        let r = report(vec![outcome(
            "slow",
            RequestStatus::Completed,
            0,
            30_000,
            times,
        )]);
        assert!(detect_stall(&r, 10_000).is_none());
    }

    #[test]
    fn gap_without_progress_is_a_stall() {
        let r = report(vec![
            outcome("a", RequestStatus::Completed, 0, 30_000, vec![10, 29_000]),
            outcome("b", RequestStatus::Completed, 5, 29_995, vec![29_000]),
        ]);
        let s = detect_stall(&r, 10_000).expect("stall");
        match s.evidence {
            Evidence::Stall {
                start_ms, end_ms, ..
            } => assert_eq!((start_ms, end_ms), (10, 29_000)),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.affected_requests, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn empty_report_has_no_stall() {
        assert!(detect_stall(&report(Vec::new()), 10_000).is_none());
    }

    #[test]
    fn cross_adapter_and_conflict_are_separated() {
        let mut r = report(Vec::new());
        r.kv_events = vec![
            kv(0, KvEventKind::Alloc, 3, 111, "trigger", "lora_a"),
            kv(0, KvEventKind::Alloc, 4, 222, "trigger", "BASE"),
            kv(0, KvEventKind::Reuse, 3, 999, "victim", "BASE"),
            kv(0, KvEventKind::PrefixHit, 4, 998, "victim", "BASE"),
        ];
        let s = structural_forensics(&r);
        let kinds: Vec<_> = s.iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            vec![
                SuspicionKind::CrossAdapterReuse,
                SuspicionKind::HashConflict
            ]
        );
        assert_eq!(s[0].affected_requests, vec!["victim".to_string()]);
    }

    #[test]
    fn clean_prefix_hit_is_not_flagged() {
        let mut r = report(Vec::new());
        r.kv_events = vec![
            kv(0, KvEventKind::Alloc, 3, 111, "a", "BASE"),
            kv(1, KvEventKind::PrefixHit, 3, 111, "b", "BASE"),
            kv(2, KvEventKind::Free, 3, 111, "b", "BASE"),
        ];
        assert!(structural_forensics(&r).is_empty());
    }

    #[test]
    fn leaked_block_after_cancel() {
        let mut r = report(vec![outcome(
            "c",
            RequestStatus::Cancelled,
            0,
            50,
            vec![10],
        )]);
        r.kv_events = vec![kv(0, KvEventKind::Alloc, 1, 5, "c", "BASE")];
        let s = kv_leak(&r, &Thresholds::default()).expect("leak");
        assert_eq!(s.kind, SuspicionKind::KvLeak);
        match &s.evidence {
            Evidence::KvLeak { owner_statuses, .. } => {
                assert_eq!(owner_statuses, &vec![RequestStatus::Cancelled])
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn free_after_grace_still_leaks() {
        let mut r = report(vec![outcome(
            "c",
            RequestStatus::Cancelled,
            0,
            50,
            vec![10],
        )]);
        r.kv_events = vec![
            kv(0, KvEventKind::Alloc, 1, 5, "c", "BASE"),
            kv(5_000, KvEventKind::Free, 1, 5, "c", "BASE"),
        ];
        assert!(kv_leak(&r, &Thresholds::default()).is_some());
        r.kv_events[1].ts = 1_000;
        assert!(kv_leak(&r, &Thresholds::default()).is_none());
    }

    #[test]
    fn crash_fingerprint_ignores_tick_numbers() {
        let a = fingerprint(
            SuspicionKind::Crash,
            &Evidence::Crash {
                at_ms: 10,
                detail: "assertion failed (scheduler tick 41)".into(),
            },
        );
        let b = fingerprint(
            SuspicionKind::Crash,
            &Evidence::Crash {
                at_ms: 99,
                detail: "assertion failed (scheduler tick 7)".into(),
            },
        );
        assert_eq!(a, b);
        assert_ne!(
            a,
            fingerprint(
                SuspicionKind::Stall,
                &Evidence::Timeout {
                    request_ids: vec![]
                }
            )
        );
    }
}
