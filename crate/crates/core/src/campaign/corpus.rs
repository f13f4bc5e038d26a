//! Corpus entries, novelty markers and weighted seed selection.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pressure::{pressure_of, PressureScore};
use crate::mutation::{TelemetrySummary, MUTATION_KEY, PARENTS_KEY};
use crate::oracle::normalize_detail;
use crate::report::ExecutionReport;
use crate::trace::TimedTrace;

/// Window used for the per-entry directed-splice feedback.
pub const FEEDBACK_WINDOW_MS: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub parents: Vec<String>,
    pub mutation: String,
}

/// Summary numbers recomputable from the stored report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryTelemetry {
    pub ttft_p50_ms: Option<u64>,
    pub ttft_max_ms: Option<u64>,
    pub peak_in_flight: usize,
    pub kv_peak: usize,
    pub distinct_adapters: usize,
    pub distinct_prompt_lengths: usize,
}

impl EntryTelemetry {
    pub fn compute(trace: &TimedTrace, report: &ExecutionReport) -> Self {
        let mut ttfts: Vec<u64> = report.outcomes.iter().filter_map(|o| o.ttft_ms).collect();
        ttfts.sort_unstable();
        let adapters: BTreeSet<&str> = trace.sends().map(|s| s.adapter_name()).collect();
        let lengths: BTreeSet<u32> = trace.sends().map(|s| s.shape.prompt_len).collect();
        Self {
            ttft_p50_ms: (!ttfts.is_empty()).then(|| ttfts[(ttfts.len() - 1) / 2]),
            ttft_max_ms: ttfts.last().copied(),
            peak_in_flight: report.peak_in_flight(),
            kv_peak: report.kv_peak_held(),
            distinct_adapters: adapters.len(),
            distinct_prompt_lengths: lengths.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub trace: TimedTrace,
    pub report: ExecutionReport,
    pub lineage: Lineage,
    pub telemetry: EntryTelemetry,
    pub feedback: TelemetrySummary,
    pub pressure: PressureScore,
    pub novelty: BTreeSet<String>,
    /// Suspicions raised by this entry's execution.
    pub suspicions: usize,
    pub added_at: u64,
}

impl CorpusEntry {
    pub fn new(
        trace: TimedTrace,
        report: ExecutionReport,
        novelty: BTreeSet<String>,
        suspicions: usize,
        added_at: u64,
    ) -> Self {
        let lineage = Lineage {
            parents: trace
                .metadata
                .get(PARENTS_KEY)
                .map(|p| p.split(',').map(str::to_string).collect())
                .unwrap_or_default(),
            mutation: trace
                .metadata
                .get(MUTATION_KEY)
                .cloned()
                .unwrap_or_else(|| "seed".into()),
        };
        Self {
            telemetry: EntryTelemetry::compute(&trace, &report),
            feedback: TelemetrySummary::from_report(&report, FEEDBACK_WINDOW_MS),
            pressure: pressure_of(&trace, &report),
            trace,
            report,
            lineage,
            novelty,
            suspicions,
            added_at,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionWeights {
    pub novelty: f64,
    pub suspicion: f64,
    pub pressure: f64,
    /// Share of probability mass spread uniformly over the corpus.
    pub floor: f64,
    /// Use the pressure score itself for the pressure term instead of KV
    /// occupancy telemetry.
    pub pressure_in_selection: bool,
}

impl Default for SelectionWeights {
    fn default() -> Self {
        Self {
            novelty: 0.4,
            suspicion: 0.4,
            pressure: 0.15,
            floor: 0.05,
            pressure_in_selection: false,
        }
    }
}

/// Novelty markers fade over this many iterations.
const NOVELTY_HALF_LIFE: f64 = 200.0;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    /// Every marker seen so far.
    pub seen: BTreeSet<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Selection weight of one entry before the uniform floor is applied.
    pub fn score(&self, idx: usize, now: u64, w: &SelectionWeights) -> f64 {
        let e = &self.entries[idx];
        let age = now.saturating_sub(e.added_at) as f64;
        let novelty =
            (e.novelty.len() as f64 / 3.0).min(1.0) * NOVELTY_HALF_LIFE / (NOVELTY_HALF_LIFE + age);
        let suspicion = if e.suspicions > 0 { 1.0 } else { 0.0 };
        let pressure = if w.pressure_in_selection {
            (e.pressure.s_total / 4.0).min(1.0)
        } else {
            let peak = self
                .entries
                .iter()
                .map(|x| x.telemetry.kv_peak)
                .max()
                .unwrap_or(0);
            if peak == 0 {
                0.0
            } else {
                e.telemetry.kv_peak as f64 / peak as f64
            }
        };
        w.novelty * novelty + w.suspicion * suspicion + w.pressure * pressure
    }

    /// P(e) = floor/|C| + (1 − floor)·score(e)/Σscore; uniform when every
    /// score is zero.
    pub fn probabilities(&self, now: u64, w: &SelectionWeights) -> Vec<f64> {
        let n = self.entries.len();
        if n == 0 {
            return Vec::new();
        }
        let scores: Vec<f64> = (0..n).map(|i| self.score(i, now, w)).collect();
        let total: f64 = scores.iter().sum();
        let floor = w.floor.clamp(0.0, 1.0);
        scores
            .iter()
            .map(|s| {
                if total > 0.0 {
                    floor / n as f64 + (1.0 - floor) * s / total
                } else {
                    1.0 / n as f64
                }
            })
            .collect()
    }

    pub fn select(&self, rng: &mut impl Rng, now: u64, w: &SelectionWeights) -> Option<usize> {
        let probs = self.probabilities(now, w);
        if probs.is_empty() {
            return None;
        }
        let mut x: f64 = rng.gen::<f64>() * probs.iter().sum::<f64>();
        for (i, p) in probs.iter().enumerate() {
            if x < *p {
                return Some(i);
            }
            x -= p;
        }
        Some(probs.len() - 1)
    }

    /// Markers in `report` that the corpus has not seen. Does not record them.
    pub fn novelty(&self, report: &ExecutionReport) -> BTreeSet<String> {
        markers(report)
            .into_iter()
            .filter(|m| !self.seen.contains(m))
            .collect()
    }

    /// Adds an entry, then evicts the lowest-scoring suspicion-free entries
    /// while the corpus is over `cap`.
    pub fn insert(&mut self, entry: CorpusEntry, cap: usize, now: u64, w: &SelectionWeights) {
        self.seen.extend(markers(&entry.report));
        self.entries.push(entry);
        while self.entries.len() > cap {
            let victim = (0..self.entries.len())
                .filter(|i| self.entries[*i].suspicions == 0)
                .min_by(|a, b| {
                    self.score(*a, now, w)
                        .total_cmp(&self.score(*b, now, w))
                        .then(a.cmp(b))
                });
            match victim {
                Some(i) => {
                    self.entries.remove(i);
                }
                None => break,
            }
        }
    }

    pub fn remember(&mut self, report: &ExecutionReport) {
        self.seen.extend(markers(report));
    }
}

fn log_bucket(x: u64, base: f64) -> i64 {
    if x == 0 {
        -1
    } else {
        (x as f64).log(base).floor() as i64
    }
}

/// Deterministic feedback buckets for one execution.
pub fn markers(report: &ExecutionReport) -> BTreeSet<String> {
    let mut m = BTreeSet::new();
    let statuses: BTreeSet<&str> = report.outcomes.iter().map(|o| o.status.as_str()).collect();
    if !statuses.is_empty() {
        m.insert(format!(
            "status:{}",
            statuses.into_iter().collect::<Vec<_>>().join("+")
        ));
    }
    for o in &report.outcomes {
        if let Some(t) = o.ttft_ms {
            m.insert(format!("ttft:1e{}", log_bucket(t, 10.0)));
        }
    }
    if report.kv_stream_available {
        m.insert(format!(
            "kv-peak:2^{}",
            log_bucket(report.kv_peak_held() as u64, 2.0)
        ));
        for w in report.kv_events.windows(2) {
            m.insert(format!(
                "kv-kind:{}>{}",
                w[0].kind.as_str(),
                w[1].kind.as_str()
            ));
        }
        for ev in &report.kv_events {
            m.insert(format!("kv-kind:{}", ev.kind.as_str()));
        }
    }
    if let Some(c) = &report.crash {
        m.insert(format!("crash:{}", normalize_detail(&c.detail)));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(id: &str, suspicions: usize) -> CorpusEntry {
        let report = ExecutionReport {
            trace_id: id.into(),
            outcomes: Vec::new(),
            kv_events: Vec::new(),
            kv_stream_available: false,
            server_crashed: false,
            crash: None,
            wall_clock_span_ms: 0,
            last_terminal_ms: 0,
            schedule_degraded: false,
            annotations: Default::default(),
        };
        CorpusEntry::new(
            TimedTrace::empty(id),
            report,
            BTreeSet::new(),
            suspicions,
            0,
        )
    }

    #[test]
    fn singleton_is_always_selected() {
        let c = Corpus {
            entries: vec![entry("a", 0)],
            seen: BTreeSet::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(c.select(&mut rng, 0, &SelectionWeights::default()), Some(0));
    }

    #[test]
    fn floor_bounds_zero_score_entries() {
        let c = Corpus {
            entries: vec![entry("a", 1), entry("b", 0), entry("c", 0)],
            seen: BTreeSet::new(),
        };
        let w = SelectionWeights::default();
        let p = c.probabilities(0, &w);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[1] >= w.floor / 3.0 - 1e-12);
        assert!(p[0] > p[1]);
    }

    #[test]
    fn eviction_spares_suspicious_entries() {
        let mut c = Corpus::default();
        let w = SelectionWeights::default();
        c.insert(entry("s", 1), 1, 0, &w);
        c.insert(entry("p", 0), 1, 0, &w);
        assert_eq!(c.len(), 1);
        assert_eq!(c.entries[0].trace.trace_id, "s");
    }
}
