//! Delta debugging over trace events, then over inter-event gaps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confirm::majority_threshold;
use crate::trace::{EventAction, TimedTrace};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MinimizeError {
    #[error("input does not reproduce under majority replay ({reproduced} of {k})")]
    Flaky { reproduced: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimized {
    pub trace: TimedTrace,
    pub original_events: usize,
    /// One line per reduction round.
    pub rounds: Vec<String>,
    pub predicate_runs: usize,
}

struct Judge<F> {
    reproduce: F,
    k: usize,
    runs: usize,
}

impl<F: FnMut(&TimedTrace) -> bool> Judge<F> {
    /// Majority over `k` runs, stopping once the outcome is decided.
    fn count(&mut self, t: &TimedTrace) -> usize {
        let need = majority_threshold(self.k);
        let mut yes = 0;
        for done in 0..self.k {
            if yes >= need || yes + (self.k - done) < need {
                break;
            }
            self.runs += 1;
            if (self.reproduce)(t) {
                yes += 1;
            }
        }
        yes
    }

    fn holds(&mut self, t: &TimedTrace) -> bool {
        self.count(t) >= majority_threshold(self.k)
    }
}

/// A Send with its controls, or a lone Wait.
fn units(trace: &TimedTrace) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut owner = std::collections::HashMap::new();
    for (i, e) in trace.events.iter().enumerate() {
        match &e.action {
            EventAction::Send { request } => {
                owner.insert(request.request_id.as_str(), out.len());
                out.push(vec![i]);
            }
            EventAction::Cancel { target } | EventAction::Disconnect { target } => {
                match owner.get(target.as_str()) {
                    Some(u) => out[*u].push(i),
                    None => out.push(vec![i]),
                }
            }
            EventAction::Wait { .. } => out.push(vec![i]),
        }
    }
    out
}

fn build(trace: &TimedTrace, keep: &[Vec<usize>]) -> TimedTrace {
    let mut idx: Vec<usize> = keep.iter().flatten().copied().collect();
    idx.sort_unstable();
    let mut t = trace.clone();
    t.events = idx.into_iter().map(|i| trace.events[i].clone()).collect();
    t
}

/// Shrinks `trace` while `reproduce` keeps holding under the ⌈2k/3⌉
/// majority rule. The result is 1-minimal over events: removing any single
/// Send (with its controls) or Wait breaks reproduction.
pub fn minimize(
    trace: &TimedTrace,
    reproduce: impl FnMut(&TimedTrace) -> bool,
    k: usize,
) -> Result<Minimized, MinimizeError> {
    let k = k.max(1);
    let mut judge = Judge {
        reproduce,
        k,
        runs: 0,
    };
    let reproduced = judge.count(trace);
    if reproduced < majority_threshold(k) {
        return Err(MinimizeError::Flaky { reproduced, k });
    }
    let mut rounds = Vec::new();
    let mut current = units(trace);
    let mut events = trace.events.len();
    let mut log = |rounds: &mut Vec<String>, what: String, kept: &[Vec<usize>]| {
        let left: usize = kept.iter().map(Vec::len).sum();
        rounds.push(format!(
            "round {}: {what}, removed {} event(s), {left} left",
            rounds.len() + 1,
            events - left
        ));
        events = left;
    };
    let mut n = 2usize;

    while current.len() >= 2 {
        let size = current.len().div_ceil(n);
        let chunks: Vec<Vec<Vec<usize>>> = current.chunks(size).map(<[_]>::to_vec).collect();
        let mut next = None;
        for (i, chunk) in chunks.iter().enumerate() {
            if chunks.len() > 2 && judge.holds(&build(trace, chunk)) {
                next = Some((
                    chunk.clone(),
                    2,
                    format!("kept chunk {i} of {}", chunks.len()),
                ));
                break;
            }
            let complement: Vec<Vec<usize>> = chunks
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, c)| c.iter().cloned())
                .collect();
            if judge.holds(&build(trace, &complement)) {
                next = Some((
                    complement,
                    (n - 1).max(2),
                    format!("removed chunk {i} of {}", chunks.len()),
                ));
                break;
            }
        }
        match next {
            Some((kept, new_n, what)) => {
                log(&mut rounds, what, &kept);
                current = kept;
                n = new_n;
            }
            None if n >= current.len() => break,
            None => n = (2 * n).min(current.len()),
        }
    }

    // Single-unit removal until fixpoint.
    let mut i = 0;
    while i < current.len() {
        let mut without = current.clone();
        without.remove(i);
        if judge.holds(&build(trace, &without)) {
            log(&mut rounds, format!("dropped unit {i}"), &without);
            current = without;
            i = 0;
        } else {
            i += 1;
        }
    }

    // Pull later events toward earlier ones.
    let mut t = build(trace, &current);
    let mut collapsed = 0;
    for i in 0..t.events.len() {
        let prev = if i == 0 { 0 } else { t.events[i - 1].offset_ms };
        let gap = t.events[i].offset_ms - prev;
        for shift in [gap, gap / 2] {
            if shift == 0 {
                continue;
            }
            let mut c = t.clone();
            for e in &mut c.events[i..] {
                e.offset_ms -= shift;
            }
            if judge.holds(&c) {
                t = c;
                collapsed += 1;
                break;
            }
        }
    }
    if collapsed > 0 {
        rounds.push(format!(
            "round {}: collapsed {collapsed} gap(s)",
            rounds.len() + 1
        ));
    }
    t.metadata
        .insert("minimized_from".into(), trace.trace_id.clone());
    Ok(Minimized {
        trace: t,
        original_events: trace.events.len(),
        rounds,
        predicate_runs: judge.runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{PromptShape, RequestSpec, TraceEvent};

    fn trace(n: usize) -> TimedTrace {
        TimedTrace::new(
            "t",
            (0..n)
                .map(|i| {
                    TraceEvent::send(
                        i as u64 * 10,
                        RequestSpec::new(format!("r{i}"), PromptShape::new(0, 8)),
                    )
                })
                .collect(),
        )
    }

    fn has(t: &TimedTrace, id: &str) -> bool {
        t.find_send(id).is_some()
    }

    #[test]
    fn finds_the_two_needed_events() {
        let t = trace(12);
        let m = minimize(&t, |c| has(c, "r3") && has(c, "r8"), 3).unwrap();
        let ids: Vec<_> = m.trace.sends().map(|s| s.request_id.clone()).collect();
        assert_eq!(ids, ["r3", "r8"]);
        assert_eq!(m.trace.events[0].offset_ms, 0);
    }

    #[test]
    fn minimal_input_is_a_fixpoint() {
        let t = TimedTrace::new(
            "t",
            vec![TraceEvent::send(
                0,
                RequestSpec::new("a", PromptShape::new(0, 8)),
            )],
        );
        let m = minimize(&t, |c| has(c, "a"), 3).unwrap();
        assert_eq!(m.trace.events, t.events);
    }

    #[test]
    fn flaky_input_is_refused() {
        // Reproduces on one run in three.
        let mut calls = 0;
        let r = minimize(
            &trace(3),
            |_| {
                calls += 1;
                calls % 3 == 1
            },
            3,
        );
        assert!(matches!(r, Err(MinimizeError::Flaky { .. })));
    }
}
