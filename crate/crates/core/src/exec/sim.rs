use std::collections::{BTreeMap, HashMap};

use super::{check_trace, Engine, EngineKind, ExecError, ExecOptions};
use crate::report::{CrashEvidence, ExecutionReport, RequestOutcome, RequestStatus};
use crate::sim::{EngineRequest, SimConfig, SimCore, SimTelemetry};
use crate::trace::{EventAction, TimedTrace, TraceEvent};

/// In-process simulator driven on a logical clock.
///
/// Client dispatch is exact (every Send leaves at its offset); the engine
/// sees arrivals at the next tick boundary. Idle stretches are skipped.
pub struct SimEngine {
    core: SimCore,
}

struct Slot {
    index: usize,
    stream: bool,
    done: bool,
}

impl SimEngine {
    pub fn new(cfg: SimConfig) -> Self {
        Self {
            core: SimCore::new(cfg),
        }
    }

    pub fn core(&self) -> &SimCore {
        &self.core
    }

    pub fn core_mut(&mut self) -> &mut SimCore {
        &mut self.core
    }

    pub fn config(&self) -> &SimConfig {
        self.core.config()
    }

    pub fn telemetry(&self) -> SimTelemetry {
        self.core.telemetry()
    }

    fn run(&mut self, trace: &TimedTrace, opts: &ExecOptions) -> ExecutionReport {
        let core = &mut self.core;
        let _ = core.drain_kv_events();
        let start = core.now_ms();
        let stall_before = core.telemetry().stalled_ticks;
        let events = &trace.events;
        let span = trace.span_ms();

        let mut outcomes: Vec<RequestOutcome> = Vec::new();
        let mut slots: HashMap<String, Slot> = HashMap::new();
        let mut in_flight: Vec<String> = Vec::new();
        let mut crash: Option<CrashEvidence> = None;
        let mut cursor = 0usize;
        let mut applied = vec![false; events.len()];

        loop {
            let now_rel = core.now_ms() - start;

            while cursor < events.len() && events[cursor].offset_ms <= now_rel {
                let event = &events[cursor];
                cursor += 1;
                if applied[cursor - 1] {
                    continue;
                }
                match &event.action {
                    EventAction::Send { request } => {
                        let n = request.sampling.n_completions.max(1) as usize;
                        let mut outcome = RequestOutcome::pending(
                            &request.request_id,
                            event.offset_ms,
                            event.offset_ms,
                            n,
                        );
                        if request.sampling.logprobs.is_some() {
                            outcome.logprob_records = Some(vec![Vec::new(); n]);
                        }
                        let submitted = if let Some(c) = &crash {
                            Err(format!("connection refused: {}", c.detail))
                        } else {
                            core.submit(EngineRequest {
                                id: request.request_id.clone(),
                                prompt: opts.synth.synthesize_request(request),
                                max_tokens: request.sampling.max_tokens,
                                temperature: request.sampling.temperature,
                                seed: request.sampling.seed,
                                logprobs: request.sampling.logprobs,
                                n: request.sampling.n_completions.max(1),
                                adapter: request.adapter.clone(),
                                arrival_ms: start + event.offset_ms,
                            })
                        };
                        let done = match submitted {
                            Ok(()) => {
                                in_flight.push(request.request_id.clone());
                                false
                            }
                            Err(detail) => {
                                outcome.error_detail = Some(detail);
                                true
                            }
                        };
                        slots.insert(
                            request.request_id.clone(),
                            Slot {
                                index: outcomes.len(),
                                stream: request.stream,
                                done,
                            },
                        );
                        outcomes.push(outcome);
                    }
                    EventAction::Cancel { .. } | EventAction::Disconnect { .. } => {
                        apply_control(core, event, &mut slots, &mut outcomes, &mut in_flight);
                    }
                    EventAction::Wait { .. } => {}
                }
            }
            expire(
                core,
                now_rel,
                opts.request_timeout_ms,
                &mut slots,
                &mut outcomes,
                &mut in_flight,
            );

            if cursor == events.len() && in_flight.is_empty() && now_rel >= span {
                break;
            }
            if crash.is_some() || (core.is_idle() && in_flight.is_empty()) {
                // Nothing to run: jump to the next scheduled instant.
                let next = events.get(cursor).map(|e| e.offset_ms).unwrap_or(span);
                core.advance_to(start + next.max(now_rel));
                if cursor == events.len() && core.now_ms() - start >= span {
                    break;
                }
                continue;
            }

            let out = core.step();
            if out.crashed {
                let evidence = core.crash().cloned().expect("crashed core has evidence");
                let at_rel = evidence.at_ms - start;
                for id in in_flight.drain(..) {
                    let slot = slots.get_mut(&id).expect("slot");
                    slot.done = true;
                    let outcome = &mut outcomes[slot.index];
                    terminate(outcome, RequestStatus::ServerError, at_rel);
                    outcome.error_detail = Some(format!("connection lost: {}", evidence.detail));
                }
                crash = Some(CrashEvidence {
                    at_ms: at_rel,
                    ..evidence
                });
                continue;
            }

            let end_rel = out.end_ms - start;
            // The client acts on its own clock: controls and timeouts that fall
            // inside the tick happen before the tick's tokens arrive.
            // Sends wait for the next step; a control aimed at one of them
            // waits too so that it lands after its Send.
            let mut pending: Vec<&str> = Vec::new();
            for (j, event) in events.iter().enumerate().skip(cursor) {
                if event.offset_ms >= end_rel {
                    break;
                }
                match &event.action {
                    EventAction::Send { request } => pending.push(&request.request_id),
                    EventAction::Wait { .. } => {}
                    EventAction::Cancel { target } | EventAction::Disconnect { target } => {
                        if !applied[j] && !pending.contains(&target.as_str()) {
                            apply_control(core, event, &mut slots, &mut outcomes, &mut in_flight);
                            applied[j] = true;
                        }
                    }
                }
            }
            expire(
                core,
                end_rel - 1,
                opts.request_timeout_ms,
                &mut slots,
                &mut outcomes,
                &mut in_flight,
            );
            let mut last_seen: Option<&str> = None;
            for emission in &out.tokens {
                let Some(slot) = slots.get(&emission.request_id).filter(|s| !s.done) else {
                    continue;
                };
                let outcome = &mut outcomes[slot.index];
                let c = emission.completion as usize;
                outcome.output_tokens[c].push(emission.token);
                if let (Some(records), Some(lp)) =
                    (&mut outcome.logprob_records, &emission.logprobs)
                {
                    records[c].push(lp.clone());
                }
                if outcome.ttft_ms.is_none() {
                    outcome.ttft_ms = Some(end_rel - outcome.dispatch_ms);
                }
                if last_seen != Some(emission.request_id.as_str()) {
                    outcome.token_times_ms.push(end_rel);
                    last_seen = Some(emission.request_id.as_str());
                }
            }
            for id in &out.finished {
                if let Some(slot) = slots.get_mut(id).filter(|s| !s.done) {
                    slot.done = true;
                    terminate(&mut outcomes[slot.index], RequestStatus::Completed, end_rel);
                }
                in_flight.retain(|f| f != id);
            }
        }

        // Unary clients only see tokens in a completed response.
        for slot in slots.values() {
            if slot.stream {
                continue;
            }
            let outcome = &mut outcomes[slot.index];
            if outcome.status == RequestStatus::Completed {
                outcome.ttft_ms = Some(outcome.total_ms);
                outcome.token_times_ms = vec![outcome.end_ms()];
            } else {
                outcome.ttft_ms = None;
                outcome.token_times_ms.clear();
                outcome.output_tokens.iter_mut().for_each(Vec::clear);
                if let Some(records) = &mut outcome.logprob_records {
                    records.iter_mut().for_each(Vec::clear);
                }
            }
        }

        let last_terminal = outcomes
            .iter()
            .map(RequestOutcome::end_ms)
            .max()
            .unwrap_or(0);
        let now_rel = core.now_ms() - start;
        let settled = if crash.is_some() {
            now_rel
        } else {
            now_rel.max(last_terminal + opts.kv_grace_ms)
        };
        core.advance_to(start + settled);

        let mut kv_events = core.drain_kv_events();
        for ev in &mut kv_events {
            ev.ts -= start;
        }

        let telemetry = core.telemetry();
        let mut annotations = BTreeMap::new();
        annotations.insert("engine".into(), "simulator".into());
        annotations.insert(
            "stalled_ticks".into(),
            (telemetry.stalled_ticks - stall_before).to_string(),
        );
        annotations.insert(
            "stale_contaminations".into(),
            telemetry.stale_contaminations.to_string(),
        );

        ExecutionReport {
            trace_id: trace.trace_id.clone(),
            outcomes,
            kv_events,
            kv_stream_available: true,
            server_crashed: crash.is_some(),
            crash,
            wall_clock_span_ms: settled,
            last_terminal_ms: last_terminal,
            schedule_degraded: false,
            annotations,
        }
    }
}

fn terminate(outcome: &mut RequestOutcome, status: RequestStatus, at_rel: u64) {
    outcome.status = status;
    outcome.total_ms = at_rel.saturating_sub(outcome.dispatch_ms);
}

fn apply_control(
    core: &mut SimCore,
    event: &TraceEvent,
    slots: &mut HashMap<String, Slot>,
    outcomes: &mut [RequestOutcome],
    in_flight: &mut Vec<String>,
) {
    let (target, status) = match &event.action {
        EventAction::Cancel { target } => (target, RequestStatus::Cancelled),
        EventAction::Disconnect { target } => (target, RequestStatus::Disconnected),
        _ => return,
    };
    if let Some(slot) = slots.get_mut(target).filter(|s| !s.done) {
        core.cancel(target);
        slot.done = true;
        in_flight.retain(|id| id != target);
        terminate(&mut outcomes[slot.index], status, event.offset_ms);
    }
}

/// Client-side timeouts that have elapsed by `now_rel`.
fn expire(
    core: &mut SimCore,
    now_rel: u64,
    timeout_ms: u64,
    slots: &mut HashMap<String, Slot>,
    outcomes: &mut [RequestOutcome],
    in_flight: &mut Vec<String>,
) {
    in_flight.retain(|id| {
        let slot = slots.get_mut(id).expect("in-flight request has a slot");
        let outcome = &mut outcomes[slot.index];
        let deadline = outcome.dispatch_ms + timeout_ms;
        if now_rel >= deadline {
            core.cancel(id);
            slot.done = true;
            terminate(outcome, RequestStatus::Timeout, deadline);
            outcome.error_detail = Some("client timeout".into());
            false
        } else {
            true
        }
    });
}

impl Engine for SimEngine {
    fn execute(
        &mut self,
        trace: &TimedTrace,
        opts: &ExecOptions,
    ) -> Result<ExecutionReport, ExecError> {
        check_trace(trace)?;
        if !self.core.is_alive() {
            return Err(ExecError::Unreachable("simulated engine is down".into()));
        }
        Ok(self.run(trace, opts))
    }

    fn reset(&mut self) -> Result<(), ExecError> {
        self.core.reset();
        Ok(())
    }

    fn healthy(&mut self) -> bool {
        self.core.is_alive()
    }

    fn kind(&self) -> EngineKind {
        EngineKind::Simulator
    }
}
