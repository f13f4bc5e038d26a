//! Stage-2 confirmation: deterministic replay, logprob-assisted relational
//! confirmation and the majority rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{Engine, ExecError, ExecOptions};
use crate::oracle::{
    behavioral_check, detect_stall, relational_check, snapshot_divergence, structural_forensics,
    BaselineStats, Evidence, Suspicion, SuspicionKind, Thresholds,
};
use crate::report::{ExecutionReport, PositionLogprobs, RequestOutcome, RequestStatus};
use crate::trace::{EventAction, RequestSpec, TimedTrace, Token, TraceEvent};

pub const DEFAULT_TOP_N: u32 = 5;
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_K: usize = 3;
/// Cap on the interferer set a timing confirmation will search.
pub const MAX_INTERFERERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    FalsePositive,
    TruePositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfirmationVerdict {
    pub verdict: Verdict,
    pub divergence_position: Option<usize>,
    /// Replay token's logprob advantage over the original token, in nats.
    pub delta: Option<f64>,
    pub in_top_n: Option<bool>,
}

impl ConfirmationVerdict {
    pub fn pass() -> Self {
        Self {
            verdict: Verdict::Pass,
            divergence_position: None,
            delta: None,
            in_top_n: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfirmError {
    #[error("replay logprobs do not cover divergence position {0}")]
    InstrumentationGap(usize),
}

/// Smallest index where the sequences differ; a strict prefix diverges at
/// its own length.
pub fn first_difference(y: &[Token], y2: &[Token]) -> Option<usize> {
    match y.iter().zip(y2).position(|(a, b)| a != b) {
        Some(p) => Some(p),
        None if y.len() != y2.len() => Some(y.len().min(y2.len())),
        None => None,
    }
}

/// Classifies a divergence between original tokens `y` and replay tokens
/// `y2`, given the replay's per-position top candidates `l`.
///
/// The divergence is benign (`FalsePositive`) when the original token is
/// among the replay's top `n` candidates and the replay token beats it by
/// less than `epsilon`. An original token missing from the reported list
/// counts as outside the top `n`.
pub fn confirm_relational(
    y: &[Token],
    y2: &[Token],
    l: &[PositionLogprobs],
    n: usize,
    epsilon: f64,
) -> Result<ConfirmationVerdict, ConfirmError> {
    let Some(p) = first_difference(y, y2) else {
        return Ok(ConfirmationVerdict::pass());
    };
    let lp = l
        .get(p)
        .filter(|v| !v.is_empty())
        .ok_or(ConfirmError::InstrumentationGap(p))?;
    let top = &lp[..n.min(lp.len())];
    let logprob_of = |t: Option<&Token>| {
        t.and_then(|t| lp.iter().find(|c| c.token == *t))
            .map(|c| c.logprob)
    };
    let original = y.get(p);
    let in_top = original.is_some_and(|t| top.iter().any(|c| c.token == *t));
    let delta = match (logprob_of(y2.get(p)), logprob_of(original)) {
        (Some(replay), Some(orig)) if in_top => Some(replay - orig),
        _ => None,
    };
    let verdict = match delta {
        Some(d) if d < epsilon => Verdict::FalsePositive,
        _ => Verdict::TruePositive,
    };
    Ok(ConfirmationVerdict {
        verdict,
        divergence_position: Some(p),
        delta,
        in_top_n: Some(in_top),
    })
}

/// Smallest reproduction count that confirms out of `k` runs: ⌈2k/3⌉.
pub fn majority_threshold(k: usize) -> usize {
    (2 * k).div_ceil(3)
}

pub fn majority_confirm(outcomes: &[bool], k: usize) -> bool {
    debug_assert_eq!(outcomes.len(), k);
    outcomes.iter().filter(|r| **r).count() >= majority_threshold(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Any TruePositive across replays and requests promotes the trace.
    AnyTruePositive,
    /// TruePositive needs a majority of replay rounds.
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfirmConfig {
    pub n: u32,
    pub epsilon: f64,
    pub k: usize,
    /// Seed forced onto replayed requests that had none.
    pub replay_seed: u64,
    pub retry_budget: u32,
    pub aggregation: Aggregation,
}

impl Default for ConfirmConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_TOP_N,
            epsilon: DEFAULT_EPSILON,
            k: DEFAULT_K,
            replay_seed: 0,
            retry_budget: 2,
            aggregation: Aggregation::AnyTruePositive,
        }
    }
}

/// Forces greedy decoding, a fixed seed and top-N logprobs on every Send.
pub fn prepare_replay(trace: &TimedTrace, cfg: &ConfirmConfig) -> TimedTrace {
    let mut out = trace.clone();
    for e in &mut out.events {
        if let EventAction::Send { request } = &mut e.action {
            force_deterministic(request, cfg);
        }
    }
    out
}

fn force_deterministic(request: &mut RequestSpec, cfg: &ConfirmConfig) {
    request.sampling.temperature = 0.0;
    request.sampling.seed = Some(request.sampling.seed.unwrap_or(cfg.replay_seed));
    request.sampling.logprobs = Some(cfg.n);
}

/// `k` replays of the prepared trace, each from a freshly reset engine.
pub fn replay(
    engine: &mut dyn Engine,
    trace: &TimedTrace,
    cfg: &ConfirmConfig,
    opts: &ExecOptions,
    k: usize,
) -> Result<Vec<ExecutionReport>, ExecError> {
    let prepared = prepare_replay(trace, cfg);
    (0..k)
        .map(|_| {
            engine.reset()?;
            engine.execute(&prepared, opts)
        })
        .collect()
}

/// One request alone on a fresh engine.
pub fn isolated_trace(
    trace: &TimedTrace,
    request_id: &str,
    cfg: &ConfirmConfig,
) -> Option<TimedTrace> {
    let mut spec = trace.find_send(request_id)?.clone();
    force_deterministic(&mut spec, cfg);
    Some(TimedTrace::new(
        format!("{}-iso-{}", trace.trace_id, request_id),
        vec![TraceEvent::send(0, spec)],
    ))
}

/// The trace with one request and its controls removed.
pub fn without_request(trace: &TimedTrace, request_id: &str) -> TimedTrace {
    let mut out = trace.clone();
    out.trace_id = format!("{}-without-{}", trace.trace_id, request_id);
    out.events.retain(|e| match &e.action {
        EventAction::Send { request } => request.request_id != request_id,
        _ => e.control_target() != Some(request_id),
    });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingEvidence {
    pub victim: String,
    /// Smallest heaviest-first set whose removal clears the anomaly.
    pub interferers: Vec<String>,
    pub campaign_baseline_p50_ms: Option<f64>,
    pub replay_baseline_ttft_ms: u64,
    pub replay_ttft_ms: u64,
    pub counterfactual_ttft_ms: Option<u64>,
    pub amplification_vs_campaign: Option<f64>,
    pub amplification_vs_replay: f64,
    /// Victim TTFT re-measured once the interfering request has finished.
    pub recovery_ttft_ms: u64,
    pub recovered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub fingerprint: String,
    pub kind: SuspicionKind,
    pub trace_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<ConfirmationVerdict>,
    pub replay_count: usize,
    pub reproduction_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingEvidence>,
    /// Relational evidence fell back to exact-match replay.
    pub degraded: bool,
    #[serde(default)]
    pub notes: Vec<String>,
    pub suspicion: Suspicion,
    /// Later findings deduplicated onto this one.
    #[serde(default)]
    pub duplicates: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dismissal {
    pub suspicion: Suspicion,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<ConfirmationVerdict>,
    pub replay_count: usize,
    pub reproduction_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ConfirmationResult {
    Finding(Finding),
    Dismissed(Dismissal),
    Unconfirmable { suspicion: Suspicion, error: String },
}

impl ConfirmationResult {
    pub fn finding(&self) -> Option<&Finding> {
        match self {
            ConfirmationResult::Finding(f) => Some(f),
            _ => None,
        }
    }
}

/// What confirmation needs besides the engine and the suspect itself.
#[derive(Debug, Clone, Default)]
pub struct ConfirmContext {
    pub config: ConfirmConfig,
    pub thresholds: Thresholds,
    pub exec: ExecOptions,
    /// Campaign TTFT p50 at the time the suspicion was raised.
    pub campaign_p50_ms: Option<f64>,
}

/// Replays a suspect and files a finding or a dismissal. Infrastructure
/// failures are retried up to the configured budget, then reported as
/// unconfirmable.
pub fn confirm_suspicion(
    engine: &mut dyn Engine,
    trace: &TimedTrace,
    report: &ExecutionReport,
    suspicion: &Suspicion,
    ctx: &ConfirmContext,
) -> ConfirmationResult {
    let mut attempt = 0;
    loop {
        match confirm_once(engine, trace, report, suspicion, ctx) {
            Ok(result) => return result,
            Err(_) if attempt < ctx.config.retry_budget => attempt += 1,
            Err(e) => {
                return ConfirmationResult::Unconfirmable {
                    suspicion: suspicion.clone(),
                    error: e.to_string(),
                }
            }
        }
    }
}

fn confirm_once(
    engine: &mut dyn Engine,
    trace: &TimedTrace,
    report: &ExecutionReport,
    suspicion: &Suspicion,
    ctx: &ConfirmContext,
) -> Result<ConfirmationResult, ExecError> {
    match (&suspicion.evidence, suspicion.kind) {
        (Evidence::RelationalDivergence { .. }, _) => {
            confirm_divergence(engine, trace, report, suspicion, ctx)
        }
        (_, kind) if kind.is_timing() => confirm_timing(engine, trace, report, suspicion, ctx),
        _ => confirm_structural(engine, trace, report, suspicion, ctx),
    }
}

struct Relational {
    verdict: Option<ConfirmationVerdict>,
    promoted: bool,
    degraded: bool,
    notes: Vec<String>,
}

/// Alg. 1 for each deterministic request in `ids`, against the request
/// replayed alone. Only the span the original run observed is compared.
/// `reference` is an output of the same prompt observed elsewhere; it is
/// judged against the same clean replay.
fn relational_rounds(
    engine: &mut dyn Engine,
    trace: &TimedTrace,
    report: &ExecutionReport,
    ids: &[String],
    reference: &[Token],
    ctx: &ConfirmContext,
) -> Result<Relational, ExecError> {
    let cfg = &ctx.config;
    let degraded = !engine.supports_logprobs();
    let mut rounds_with_tp = 0;
    let mut strongest: Option<ConfirmationVerdict> = None;
    let mut any_fp: Option<ConfirmationVerdict> = None;
    let mut notes = Vec::new();
    for _ in 0..cfg.k {
        let mut round_tp = false;
        for id in ids {
            let (Some(spec), Some(original)) = (trace.find_send(id), report.outcome(id)) else {
                continue;
            };
            if !spec.sampling.is_deterministic() || original.primary_tokens().is_empty() {
                continue;
            }
            let iso = isolated_trace(trace, id, cfg).expect("request exists");
            engine.reset()?;
            let replayed = engine.execute(&iso, &ctx.exec)?;
            let Some(r) = replayed.outcome(id) else {
                continue;
            };
            let y2 = r.primary_tokens();
            let l = r
                .logprob_records
                .as_ref()
                .and_then(|recs| recs.first())
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            let mut verdict = ConfirmationVerdict::pass();
            for y in [original.primary_tokens(), reference] {
                if y.is_empty() {
                    continue;
                }
                let len = y.len().min(y2.len());
                let (y, y2) = (&y[..len], &y2[..len]);
                let v = if degraded {
                    match first_difference(y, y2) {
                        None => ConfirmationVerdict::pass(),
                        Some(p) => ConfirmationVerdict {
                            verdict: Verdict::TruePositive,
                            divergence_position: Some(p),
                            delta: None,
                            in_top_n: None,
                        },
                    }
                } else {
                    match confirm_relational(y, y2, l, cfg.n as usize, cfg.epsilon) {
                        Ok(v) => v,
                        Err(e) => {
                            notes.push(format!("{id}: {e}"));
                            continue;
                        }
                    }
                };
                if rank(v.verdict) > rank(verdict.verdict) {
                    verdict = v;
                }
            }
            match verdict.verdict {
                Verdict::TruePositive => {
                    round_tp = true;
                    if strongest.is_none_or(|s| s.divergence_position > verdict.divergence_position)
                    {
                        strongest = Some(verdict);
                    }
                }
                Verdict::FalsePositive => {
                    any_fp.get_or_insert(verdict);
                }
                Verdict::Pass => {}
            }
        }
        rounds_with_tp += usize::from(round_tp);
    }
    let promoted = match cfg.aggregation {
        Aggregation::AnyTruePositive => rounds_with_tp > 0,
        Aggregation::Majority => rounds_with_tp >= majority_threshold(cfg.k),
    };
    let verdict = if promoted {
        strongest
    } else {
        any_fp.or(strongest)
    };
    Ok(Relational {
        verdict,
        promoted,
        degraded,
        notes,
    })
}

fn rank(v: Verdict) -> u8 {
    match v {
        Verdict::Pass => 0,
        Verdict::FalsePositive => 1,
        Verdict::TruePositive => 2,
    }
}

fn confirm_divergence(
    engine: &mut dyn Engine,
    trace: &TimedTrace,
    report: &ExecutionReport,
    suspicion: &Suspicion,
    ctx: &ConfirmContext,
) -> Result<ConfirmationResult, ExecError> {
    let k = ctx.config.k;
    // Does the divergence itself come back under controlled replay?
    let replays = replay(engine, trace, &ctx.config, &ctx.exec, k)?;
    let reproduced =
        replays
            .iter()
            .filter(|r| {
                suspicion.affected_requests.iter().any(|id| {
                    match (report.outcome(id), r.outcome(id)) {
                        (Some(a), Some(b)) => {
                            let (a, b) = (a.primary_tokens(), b.primary_tokens());
                            let len = a.len().min(b.len());
                            len > 0 && a[..len] == b[..len]
                        }
                        _ => false,
                    }
                }) && !relational_check(trace, r).is_empty()
            })
            .count();

    let reference = match &suspicion.evidence {
        Evidence::RelationalDivergence {
            reference_tokens, ..
        } => reference_tokens.as_slice(),
        _ => &[],
    };
    let rel = relational_rounds(
        engine,
        trace,
        report,
        &suspicion.affected_requests,
        reference,
        ctx,
    )?;
    if rel.promoted {
        return Ok(ConfirmationResult::Finding(Finding {
            fingerprint: suspicion.fingerprint.clone(),
            kind: suspicion.kind,
            trace_id: suspicion.trace_id.clone(),
            verdict: rel.verdict,
            replay_count: k,
            reproduction_count: reproduced,
            timing: None,
            degraded: rel.degraded,
            notes: rel.notes,
            suspicion: suspicion.clone(),
            duplicates: 0,
        }));
    }
    let reason = match rel.verdict.map(|v| v.verdict) {
        Some(Verdict::FalsePositive) => "near-tie divergence within tolerance".to_string(),
        _ => "isolated replay matches the original output".to_string(),
    };
    Ok(ConfirmationResult::Dismissed(Dismissal {
        suspicion: suspicion.clone(),
        reason,
        verdict: rel.verdict,
        replay_count: k,
        reproduction_count: reproduced,
    }))
}

/// Whether a replay shows the same anomaly: same kind and fingerprint.
fn reproduces(
    trace: &TimedTrace,
    replayed: &ExecutionReport,
    suspicion: &Suspicion,
    thresholds: &Thresholds,
) -> bool {
    let mut found =
        behavioral_check(trace, replayed, &BaselineStats::default(), thresholds).suspicions;
    found.extend(structural_forensics(replayed));
    found.iter().any(|s| s.fingerprint == suspicion.fingerprint)
}

fn confirm_structural(
    engine: &mut dyn Engine,
    trace: &TimedTrace,
    report: &ExecutionReport,
    suspicion: &Suspicion,
    ctx: &ConfirmContext,
) -> Result<ConfirmationResult, ExecError> {
    let k = ctx.config.k;
    let replays = replay(engine, trace, &ctx.config, &ctx.exec, k)?;
    let flags: Vec<bool> = replays
        .iter()
        .map(|r| reproduces(trace, r, suspicion, &ctx.thresholds))
        .collect();
    let reproduced = flags.iter().filter(|f| **f).count();
    if !majority_confirm(&flags, k) {
        return Ok(ConfirmationResult::Dismissed(Dismissal {
            suspicion: suspicion.clone(),
            reason: format!("reproduced in {reproduced} of {k} replays"),
            verdict: None,
            replay_count: k,
            reproduction_count: reproduced,
        }));
    }
    let mut notes = Vec::new();
    let refs: Vec<&ExecutionReport> = replays.iter().collect();
    if let Some(s) = snapshot_divergence(&refs) {
        notes.push(format!(
            "block snapshots differ across replays for {} request(s)",
            s.affected_requests.len()
        ));
    }
    // Block-level contamination should show in the victims' tokens too.
    let (verdict, degraded) = if suspicion.kind.is_state_corruption() {
        let rel = relational_rounds(
            engine,
            trace,
            report,
            &suspicion.affected_requests,
            &[],
            ctx,
        )?;
        notes.extend(rel.notes);
        (rel.verdict, rel.degraded)
    } else {
        (None, false)
    };
    Ok(ConfirmationResult::Finding(Finding {
        fingerprint: suspicion.fingerprint.clone(),
        kind: suspicion.kind,
        trace_id: suspicion.trace_id.clone(),
        verdict,
        replay_count: k,
        reproduction_count: reproduced,
        timing: None,
        degraded,
        notes,
        suspicion: suspicion.clone(),
        duplicates: 0,
    }))
}

fn cost(spec: &RequestSpec) -> u64 {
    u64::from(spec.sampling.n_completions.max(1))
        * u64::from(spec.shape.prompt_len + spec.sampling.max_tokens)
}

/// First-token latency as the client saw it; requests that never produced a
/// token count for their whole lifetime.
fn observed_ttft(o: Option<&RequestOutcome>, timeout_ms: u64) -> u64 {
    match o {
        Some(o) => o
            .ttft_ms
            .unwrap_or(if o.status == RequestStatus::Completed {
                o.total_ms
            } else {
                o.total_ms.max(timeout_ms)
            }),
        None => timeout_ms,
    }
}

fn confirm_timing(
    engine: &mut dyn Engine,
    trace: &TimedTrace,
    report: &ExecutionReport,
    suspicion: &Suspicion,
    ctx: &ConfirmContext,
) -> Result<ConfirmationResult, ExecError> {
    let k = ctx.config.k;
    let timeout = ctx.exec.request_timeout_ms;
    let dismiss = |reason: String, reproduced: usize| {
        ConfirmationResult::Dismissed(Dismissal {
            suspicion: suspicion.clone(),
            reason,
            verdict: None,
            replay_count: k,
            reproduction_count: reproduced,
        })
    };

    // Victims ordered worst first.
    let mut victims: Vec<&RequestOutcome> = suspicion
        .affected_requests
        .iter()
        .filter_map(|id| report.outcome(id))
        .collect();
    victims.sort_by_key(|o| {
        (
            std::cmp::Reverse(observed_ttft(Some(o), timeout)),
            o.request_id.clone(),
        )
    });
    let window = victims
        .iter()
        .map(|o| (o.dispatch_ms, o.end_ms()))
        .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)));
    let Some((lo, hi)) = window else {
        return Ok(dismiss("no affected request in the report".into(), 0));
    };
    // Requests alive alongside the victims, heaviest first.
    let mut candidates: Vec<&RequestSpec> = trace
        .sends()
        .filter(|s| {
            report
                .outcome(&s.request_id)
                .is_some_and(|o| o.dispatch_ms <= hi && o.end_ms() >= lo)
        })
        .collect();
    candidates.sort_by_key(|s| (std::cmp::Reverse(cost(s)), s.request_id.clone()));
    let heaviest = candidates.first().map(|s| s.request_id.clone());
    let Some(victim) = victims
        .iter()
        .map(|o| o.request_id.clone())
        .find(|id| Some(id) != heaviest.as_ref())
    else {
        return Ok(dismiss(
            "latency is self-inflicted by the heaviest request".into(),
            0,
        ));
    };
    candidates.retain(|s| s.request_id != victim);

    let cfg = &ctx.config;
    let factor = ctx.thresholds.ttft_factor;
    let window = ctx.thresholds.stall_window_ms;
    let prepared = prepare_replay(trace, cfg);
    let iso = isolated_trace(trace, &victim, cfg).expect("victim is a send");
    let tripped = |full: &ExecutionReport, b: u64, cf: &ExecutionReport| {
        let a = observed_ttft(full.outcome(&victim), timeout);
        let c = observed_ttft(cf.outcome(&victim), timeout);
        match suspicion.kind {
            SuspicionKind::Stall => {
                detect_stall(full, window).is_some() && detect_stall(cf, window).is_none()
            }
            _ => a as f64 >= factor * b as f64 && a as f64 >= factor * c.max(1) as f64,
        }
    };

    // Grow the interferer set, heaviest first, until taking it out of the
    // replay clears the anomaly.
    engine.reset()?;
    let b0 = observed_ttft(engine.execute(&iso, &ctx.exec)?.outcome(&victim), timeout).max(1);
    engine.reset()?;
    let full0 = engine.execute(&prepared, &ctx.exec)?;
    let mut interferers: Vec<String> = Vec::new();
    let mut counterfactual = None;
    for s in candidates.iter().take(MAX_INTERFERERS) {
        interferers.push(s.request_id.clone());
        let t = interferers
            .iter()
            .fold(prepared.clone(), |t, id| without_request(&t, id));
        engine.reset()?;
        if tripped(&full0, b0, &engine.execute(&t, &ctx.exec)?) {
            counterfactual = Some(t);
            break;
        }
    }
    let Some(counterfactual) = counterfactual else {
        return Ok(dismiss(
            format!("no set of up to {MAX_INTERFERERS} co-scheduled requests explains the latency"),
            0,
        ));
    };

    let mut flags = Vec::with_capacity(k);
    let mut measured: Option<(u64, u64, u64)> = None;
    for _ in 0..k {
        engine.reset()?;
        let b = observed_ttft(engine.execute(&iso, &ctx.exec)?.outcome(&victim), timeout).max(1);
        engine.reset()?;
        let full = engine.execute(&prepared, &ctx.exec)?;
        engine.reset()?;
        let cf = engine.execute(&counterfactual, &ctx.exec)?;
        let hit = tripped(&full, b, &cf);
        flags.push(hit);
        if hit || measured.is_none() {
            measured = Some((
                b,
                observed_ttft(full.outcome(&victim), timeout),
                observed_ttft(cf.outcome(&victim), timeout),
            ));
        }
    }
    let reproduced = flags.iter().filter(|f| **f).count();
    if !majority_confirm(&flags, k) {
        return Ok(dismiss(
            format!("latency re-tripped in {reproduced} of {k} replays with the interferer as the cause"),
            reproduced,
        ));
    }

    // Recovery: once the replay (interferer included) has drained, the
    // victim alone on the same engine should be fast again.
    let (b, a, c) = measured.expect("k >= 1");
    let after = engine.execute(&iso, &ctx.exec)?;
    let r = observed_ttft(after.outcome(&victim), timeout);
    let campaign = match &suspicion.evidence {
        Evidence::TtftRegression {
            baseline_p50_ms, ..
        } => Some(*baseline_p50_ms),
        _ => ctx.campaign_p50_ms,
    };
    let timing = TimingEvidence {
        victim,
        interferers,
        campaign_baseline_p50_ms: campaign,
        replay_baseline_ttft_ms: b,
        replay_ttft_ms: a,
        counterfactual_ttft_ms: Some(c),
        amplification_vs_campaign: campaign.map(|p| a as f64 / p.max(1.0)),
        amplification_vs_replay: a as f64 / b as f64,
        recovery_ttft_ms: r,
        recovered: r <= 2 * b,
    };
    Ok(ConfirmationResult::Finding(Finding {
        fingerprint: suspicion.fingerprint.clone(),
        kind: suspicion.kind,
        trace_id: suspicion.trace_id.clone(),
        verdict: None,
        replay_count: k,
        reproduction_count: reproduced,
        timing: Some(timing),
        degraded: false,
        notes: Vec::new(),
        suspicion: suspicion.clone(),
        duplicates: 0,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::TokenLogprob;

    fn lp(pairs: &[(Token, f64)]) -> PositionLogprobs {
        pairs
            .iter()
            .map(|&(token, logprob)| TokenLogprob { token, logprob })
            .collect()
    }

    #[test]
    fn first_difference_cases() {
        assert_eq!(first_difference(&[5, 7, 9], &[5, 7, 9]), None);
        assert_eq!(first_difference(&[5, 7, 9], &[5, 8, 9]), Some(1));
        assert_eq!(first_difference(&[5, 7], &[5, 7, 9]), Some(2));
        assert_eq!(first_difference(&[], &[]), None);
    }

    #[test]
    fn near_tie_is_false_positive() {
        let l = vec![
            lp(&[(5, -0.1)]),
            lp(&[(8, -0.69), (7, -0.70), (1, -3.0), (2, -4.0), (3, -5.0)]),
        ];
        let v = confirm_relational(&[5, 7], &[5, 8], &l, 5, 0.1).unwrap();
        assert_eq!(v.verdict, Verdict::FalsePositive);
        assert_eq!(v.divergence_position, Some(1));
        assert!((v.delta.unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(v.in_top_n, Some(true));
    }

    #[test]
    fn missing_original_is_true_positive() {
        let l = vec![
            lp(&[(5, -0.1)]),
            lp(&[(8, -0.2), (1, -3.0), (2, -4.0), (3, -5.0), (4, -6.0)]),
        ];
        let v = confirm_relational(&[5, 7], &[5, 8], &l, 5, 0.1).unwrap();
        assert_eq!(v.verdict, Verdict::TruePositive);
        assert_eq!(v.delta, None);
        assert_eq!(v.in_top_n, Some(false));
    }

    #[test]
    fn large_advantage_is_true_positive() {
        let l = vec![lp(&[(5, -0.1)]), lp(&[(8, -0.1), (7, -3.3)])];
        let v = confirm_relational(&[5, 7], &[5, 8], &l, 5, 0.1).unwrap();
        assert_eq!(v.verdict, Verdict::TruePositive);
        assert!((v.delta.unwrap() - 3.2).abs() < 1e-12);
    }

    #[test]
    fn gap_in_logprobs_is_refused() {
        let l = vec![lp(&[(5, -0.1)])];
        assert_eq!(
            confirm_relational(&[5, 7], &[5, 8], &l, 5, 0.1),
            Err(ConfirmError::InstrumentationGap(1))
        );
        assert_eq!(
            confirm_relational(&[1], &[1], &[], 5, 0.1).unwrap().verdict,
            Verdict::Pass
        );
    }

    #[test]
    fn majority_examples() {
        assert!(majority_confirm(&[true, true, false], 3));
        assert!(!majority_confirm(&[true, true, true, false, false], 5));
        assert!(majority_confirm(&[true], 1));
        assert_eq!(majority_threshold(5), 4);
    }
}
