//! Seed construction and trace mutation: timing, event and splicing classes,
//! plus telemetry-directed splicing.
//!
//! Every operator is a pure function of its inputs and an rng seed, and every
//! output passes [`validate`](crate::trace::validate). Lineage goes into the
//! trace metadata under [`LINEAGE_KEY`] and [`MUTATION_KEY`].

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hashing::hash_str;
use crate::report::{ExecutionReport, KvEventKind};
use crate::trace::{
    repair, EventAction, PromptShape, RequestSpec, SamplingConfig, TimedTrace, TraceEvent,
    BASE_ADAPTER,
};

pub const MUTATION_KEY: &str = "mutation";
pub const LINEAGE_KEY: &str = "lineage";
pub const PARENTS_KEY: &str = "parents";
pub const FALLBACK_LINEAGE: &str = "undirected-fallback";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    TimingJitter,
    TimingCollapse,
    EventInsert,
    EventDelete,
    EventModify,
    Splice,
    DirectedSplice,
}

impl MutationKind {
    pub const ALL: [MutationKind; 7] = [
        MutationKind::TimingJitter,
        MutationKind::TimingCollapse,
        MutationKind::EventInsert,
        MutationKind::EventDelete,
        MutationKind::EventModify,
        MutationKind::Splice,
        MutationKind::DirectedSplice,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MutationKind::TimingJitter => "timing_jitter",
            MutationKind::TimingCollapse => "timing_collapse",
            MutationKind::EventInsert => "event_insert",
            MutationKind::EventDelete => "event_delete",
            MutationKind::EventModify => "event_modify",
            MutationKind::Splice => "splice",
            MutationKind::DirectedSplice => "directed_splice",
        }
    }
}

impl fmt::Display for MutationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn record_lineage(trace: &mut TimedTrace, step: &str, parents: &[&str]) {
    let chain = match trace.metadata.get(LINEAGE_KEY) {
        Some(prev) if !prev.is_empty() => format!("{prev},{step}"),
        _ => step.to_string(),
    };
    trace.metadata.insert(LINEAGE_KEY.into(), chain);
    trace.metadata.insert(MUTATION_KEY.into(), step.to_string());
    if !parents.is_empty() {
        trace.metadata.insert(PARENTS_KEY.into(), parents.join(","));
    }
}

/// Id for a two-parent child. Ids stay short across generations; the full
/// parent ids live in the lineage metadata.
fn child_id(sep: char, a: &str, b: &str) -> String {
    let short = |id: &str| -> String {
        if id.len() <= 24 {
            id.to_string()
        } else {
            format!("{:012x}", hash_str(id) >> 16)
        }
    };
    let id = format!("{}{sep}{}", short(a), short(b));
    if id.len() <= 24 {
        id
    } else {
        format!("{:012x}", hash_str(&id) >> 16)
    }
}

// ---------------------------------------------------------------------------
// Seeds

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedProfile {
    pub n_requests: usize,
    pub shape_palette: Vec<PromptShape>,
    /// Adapter names; repeat a name to weight it.
    pub adapter_palette: Vec<String>,
    pub burst_window_ms: u64,
    /// Large BASE requests at offset 0 that fill the KV cache.
    pub kv_filler_count: usize,
    /// Filler prompt shape; the largest palette shape when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filler_shape: Option<PromptShape>,
    pub filler_max_tokens: u32,
    pub max_tokens_palette: Vec<u32>,
    pub n_completions_palette: Vec<u32>,
    /// Requests draw their prompt family from this many families; 0 gives
    /// every request its own prompt.
    pub family_count: usize,
    /// Offset of the burst window.
    pub start_ms: u64,
    pub logprobs: Option<u32>,
    pub stream: bool,
}

impl Default for SeedProfile {
    fn default() -> Self {
        Self::mixed()
    }
}

impl SeedProfile {
    /// Repeated prompt families over a nearly full cache.
    pub fn prefix_sharing() -> Self {
        Self {
            n_requests: 12,
            shape_palette: vec![
                PromptShape::new(256, 256),
                PromptShape::new(512, 512),
                PromptShape::new(512, 1024),
                PromptShape::new(1024, 2048),
                PromptShape::new(0, 4096),
            ],
            adapter_palette: vec![BASE_ADAPTER.into()],
            burst_window_ms: 400,
            kv_filler_count: 5,
            filler_shape: None,
            filler_max_tokens: 16,
            max_tokens_palette: vec![4, 8, 16, 64],
            n_completions_palette: vec![1],
            family_count: 3,
            start_ms: 0,
            logprobs: None,
            stream: true,
        }
    }

    /// A LoRA burst over a nearly full cache.
    pub fn lora() -> Self {
        Self {
            n_requests: 10,
            shape_palette: vec![PromptShape::new(0, 256), PromptShape::new(128, 512)],
            adapter_palette: ["lora_b", "lora_b", "lora_b", "lora_a", "lora_c", "BASE"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            burst_window_ms: 6,
            kv_filler_count: 6,
            filler_shape: Some(PromptShape::new(0, 4096)),
            filler_max_tokens: 16,
            max_tokens_palette: vec![16, 32],
            n_completions_palette: vec![1],
            family_count: 0,
            start_ms: 10,
            logprobs: None,
            stream: true,
        }
    }

    /// Small interactive requests next to occasional many-completion ones.
    pub fn interference() -> Self {
        Self {
            n_requests: 6,
            shape_palette: vec![PromptShape::new(0, 256), PromptShape::new(128, 512)],
            adapter_palette: vec![BASE_ADAPTER.into()],
            burst_window_ms: 300,
            kv_filler_count: 0,
            filler_shape: None,
            filler_max_tokens: 16,
            max_tokens_palette: vec![16, 32, 64],
            n_completions_palette: vec![1, 1, 1, 2, 8],
            family_count: 0,
            start_ms: 0,
            logprobs: None,
            stream: true,
        }
    }

    pub fn mixed() -> Self {
        Self {
            n_requests: 10,
            shape_palette: vec![
                PromptShape::new(0, 128),
                PromptShape::new(256, 512),
                PromptShape::new(512, 1024),
                PromptShape::new(0, 2048),
            ],
            adapter_palette: ["BASE", "BASE", "lora_a", "lora_b"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            burst_window_ms: 500,
            kv_filler_count: 2,
            filler_shape: None,
            filler_max_tokens: 64,
            max_tokens_palette: vec![8, 16, 32],
            n_completions_palette: vec![1, 1, 2],
            family_count: 4,
            start_ms: 0,
            logprobs: None,
            stream: true,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "prefix_sharing" | "prefix-sharing" => Some(Self::prefix_sharing()),
            "lora" => Some(Self::lora()),
            "interference" => Some(Self::interference()),
            "mixed" => Some(Self::mixed()),
            _ => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        !self.shape_palette.is_empty()
            && self.shape_palette.iter().all(PromptShape::is_valid)
            && self
                .filler_shape
                .as_ref()
                .map_or(true, PromptShape::is_valid)
            && !self.adapter_palette.is_empty()
            && !self.max_tokens_palette.is_empty()
            && self.max_tokens_palette.iter().all(|m| *m > 0)
            && !self.n_completions_palette.is_empty()
            && self.n_completions_palette.iter().all(|n| *n > 0)
    }
}

/// Fillers at offset 0, then `n_requests` Sends clustered in the burst window.
pub fn generate_seed(profile: &SeedProfile, rng_seed: u64) -> TimedTrace {
    assert!(
        profile.is_valid(),
        "seed profile has an empty or invalid palette"
    );
    let mut rng = rng_for(rng_seed);
    let mut events = Vec::with_capacity(profile.kv_filler_count + profile.n_requests);

    let filler_shape = profile.filler_shape.unwrap_or_else(|| {
        *profile
            .shape_palette
            .iter()
            .max_by_key(|s| (s.prompt_len, s.prefix_len))
            .expect("non-empty palette")
    });
    for i in 0..profile.kv_filler_count {
        let mut spec = RequestSpec::new(format!("f{i}"), filler_shape);
        spec.sampling = SamplingConfig::deterministic(profile.filler_max_tokens.max(1));
        spec.stream = profile.stream;
        events.push(TraceEvent::send(0, spec));
    }

    let window = profile.burst_window_ms;
    let n = profile.n_requests;
    let mut offsets: Vec<u64> = if (n as u64) <= window + 1 {
        rand::seq::index::sample(&mut rng, window as usize + 1, n)
            .into_iter()
            .map(|o| o as u64)
            .collect()
    } else {
        (0..n).map(|_| rng.gen_range(0..=window)).collect()
    };
    offsets.sort_unstable();

    for (i, offset) in offsets.into_iter().enumerate() {
        let shape = *profile.shape_palette.choose(&mut rng).expect("non-empty");
        let adapter = profile.adapter_palette.choose(&mut rng).expect("non-empty");
        let mut spec = RequestSpec::new(format!("r{i}"), shape);
        spec.sampling = SamplingConfig {
            max_tokens: *profile
                .max_tokens_palette
                .choose(&mut rng)
                .expect("non-empty"),
            n_completions: *profile
                .n_completions_palette
                .choose(&mut rng)
                .expect("non-empty"),
            logprobs: profile.logprobs,
            ..SamplingConfig::deterministic(1)
        };
        spec.adapter = (adapter != BASE_ADAPTER).then(|| adapter.clone());
        if profile.family_count > 0 {
            spec.prompt_family_id = Some(format!("fam{}", rng.gen_range(0..profile.family_count)));
        }
        spec.stream = profile.stream;
        events.push(TraceEvent::send(profile.start_ms + offset, spec));
    }

    let mut trace = TimedTrace::new(format!("seed-{rng_seed}"), events);
    record_lineage(&mut trace, "seed", &[]);
    trace
}

// ---------------------------------------------------------------------------
// Timing

/// Moves each control event no earlier than the Send it targets, then sorts
/// stably so a Send still precedes its controls at equal offsets.
fn settle_offsets(trace: &mut TimedTrace) {
    let mut sent_at = std::collections::HashMap::new();
    for e in &trace.events {
        if let Some(s) = e.as_send() {
            sent_at.insert(s.request_id.clone(), e.offset_ms);
        }
    }
    for e in &mut trace.events {
        if let Some(at) = e.control_target().and_then(|t| sent_at.get(t)) {
            e.offset_ms = e.offset_ms.max(*at);
        }
    }
    trace.events.sort_by_key(|e| e.offset_ms);
}

/// Uniform jitter of up to `intensity` seconds on every offset, clamped at 0.
pub fn mutate_timing(trace: &TimedTrace, rng_seed: u64, intensity: f64) -> TimedTrace {
    let mut rng = rng_for(rng_seed);
    let j = (intensity.clamp(0.0, 1.0) * 1000.0).round() as i64;
    let mut out = trace.clone();
    if j > 0 {
        for e in &mut out.events {
            let d = rng.gen_range(-j..=j);
            e.offset_ms = (e.offset_ms as i64 + d).max(0) as u64;
        }
        settle_offsets(&mut out);
    }
    record_lineage(
        &mut out,
        MutationKind::TimingJitter.as_str(),
        &[&trace.trace_id],
    );
    out
}

/// Pulls a random group of Sends onto one offset so they share an admission
/// tick. Their controls move by the same amount.
pub fn collapse(trace: &TimedTrace, rng_seed: u64) -> TimedTrace {
    let mut rng = rng_for(rng_seed);
    let mut out = trace.clone();
    let sends: Vec<usize> = (0..out.events.len())
        .filter(|i| out.events[*i].as_send().is_some())
        .collect();
    if sends.len() >= 2 {
        let pivot = *sends.choose(&mut rng).expect("non-empty");
        let target = out.events[pivot].offset_ms;
        let mut group: Vec<usize> = sends
            .iter()
            .copied()
            .filter(|i| *i != pivot && rng.gen_bool(0.5))
            .collect();
        if group.is_empty() {
            group.push(
                *sends
                    .iter()
                    .filter(|i| **i != pivot)
                    .collect::<Vec<_>>()
                    .choose(&mut rng)
                    .copied()
                    .expect("two sends"),
            );
        }
        for i in group {
            let delta = target as i64 - out.events[i].offset_ms as i64;
            out.events[i].offset_ms = target;
            let id = out.events[i].as_send().expect("send").request_id.clone();
            for e in &mut out.events {
                if e.control_target() == Some(id.as_str()) {
                    e.offset_ms = (e.offset_ms as i64 + delta).max(target as i64) as u64;
                }
            }
        }
        settle_offsets(&mut out);
    }
    record_lineage(
        &mut out,
        MutationKind::TimingCollapse.as_str(),
        &[&trace.trace_id],
    );
    out
}

// ---------------------------------------------------------------------------
// Events

/// Values event modification draws from besides those already in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub shapes: Vec<PromptShape>,
    pub adapters: Vec<String>,
    pub max_tokens: Vec<u32>,
    pub n_completions: Vec<u32>,
}

impl Default for Palette {
    fn default() -> Self {
        Self::from_profile(&SeedProfile::mixed())
    }
}

impl Palette {
    pub fn from_profile(p: &SeedProfile) -> Self {
        let mut adapters: Vec<String> = p.adapter_palette.clone();
        if !adapters.iter().any(|a| a == BASE_ADAPTER) {
            adapters.push(BASE_ADAPTER.into());
        }
        Self {
            shapes: p.shape_palette.clone(),
            adapters,
            max_tokens: p.max_tokens_palette.clone(),
            n_completions: p.n_completions_palette.clone(),
        }
    }
}

fn fresh_id(trace: &TimedTrace, rng: &mut ChaCha8Rng) -> String {
    let taken: HashSet<&str> = trace.sends().map(|s| s.request_id.as_str()).collect();
    loop {
        let id = format!("m{:06x}", rng.gen::<u32>() & 0xFF_FFFF);
        if !taken.contains(id.as_str()) {
            return id;
        }
    }
}

/// Removes a Send and every control that targets it.
pub fn delete_request(trace: &mut TimedTrace, request_id: &str) {
    trace.events.retain(|e| match &e.action {
        EventAction::Send { request } => request.request_id != request_id,
        _ => e.control_target() != Some(request_id),
    });
}

/// One insert, delete or modify. Returns the child and the kind applied.
pub fn mutate_events(
    trace: &TimedTrace,
    rng_seed: u64,
    palette: &Palette,
) -> (TimedTrace, MutationKind) {
    let mut rng = rng_for(rng_seed);
    let mut out = trace.clone();
    let kind = if out.events.is_empty() {
        MutationKind::EventInsert
    } else {
        *[
            MutationKind::EventInsert,
            MutationKind::EventDelete,
            MutationKind::EventModify,
        ]
        .choose(&mut rng)
        .expect("non-empty")
    };
    match kind {
        MutationKind::EventInsert => insert_event(&mut out, &mut rng, palette),
        MutationKind::EventDelete => {
            let i = rng.gen_range(0..out.events.len());
            match out.events[i].as_send().map(|s| s.request_id.clone()) {
                Some(id) => delete_request(&mut out, &id),
                None => {
                    out.events.remove(i);
                }
            }
        }
        _ => modify_send(&mut out, &mut rng, palette),
    }
    let mut out = repair(&out);
    record_lineage(&mut out, kind.as_str(), &[&trace.trace_id]);
    (out, kind)
}

fn insert_event(out: &mut TimedTrace, rng: &mut ChaCha8Rng, palette: &Palette) {
    let span = out.span_ms();
    let sends: Vec<(u64, RequestSpec)> = out
        .events
        .iter()
        .filter_map(|e| e.as_send().map(|s| (e.offset_ms, s.clone())))
        .collect();
    let choice = if sends.is_empty() {
        0
    } else {
        rng.gen_range(0..4)
    };
    let event = match choice {
        1 | 2 => {
            let (at, spec) = sends.choose(rng).expect("non-empty");
            // Somewhere in the request's expected lifetime.
            let life = 5 * u64::from(spec.sampling.max_tokens) + 50;
            let offset = at + rng.gen_range(1..=life);
            if choice == 1 {
                TraceEvent::cancel(offset, spec.request_id.clone())
            } else {
                TraceEvent::disconnect(offset, spec.request_id.clone())
            }
        }
        3 => TraceEvent::wait(rng.gen_range(0..=span), rng.gen_range(1..=1000)),
        _ => {
            // A new request, often sharing an existing prompt.
            let mut spec = match sends.choose(rng) {
                Some((_, s)) if rng.gen_bool(0.6) => {
                    let mut s = s.clone();
                    s.prompt_family_id = Some(s.prompt_identity().to_string());
                    s
                }
                _ => {
                    let mut s = RequestSpec::new("", *palette.shapes.choose(rng).expect("palette"));
                    s.sampling.max_tokens = *palette.max_tokens.choose(rng).expect("palette");
                    let a = palette.adapters.choose(rng).expect("palette");
                    s.adapter = (a != BASE_ADAPTER).then(|| a.clone());
                    s
                }
            };
            spec.request_id = fresh_id(out, rng);
            TraceEvent::send(rng.gen_range(0..=span + 100), spec)
        }
    };
    out.events.push(event);
    settle_offsets(out);
}

fn modify_send(out: &mut TimedTrace, rng: &mut ChaCha8Rng, palette: &Palette) {
    let idx: Vec<usize> = (0..out.events.len())
        .filter(|i| out.events[*i].as_send().is_some())
        .collect();
    let Some(&i) = idx.choose(rng) else {
        return;
    };
    let EventAction::Send { request } = &mut out.events[i].action else {
        unreachable!()
    };
    match rng.gen_range(0..6) {
        0 => request.shape = *palette.shapes.choose(rng).expect("palette"),
        1 => request.sampling.max_tokens = *palette.max_tokens.choose(rng).expect("palette"),
        2 => request.sampling.n_completions = *palette.n_completions.choose(rng).expect("palette"),
        3 => {
            let a = palette.adapters.choose(rng).expect("palette");
            request.adapter = (a != BASE_ADAPTER).then(|| a.clone());
        }
        4 => request.stream = !request.stream,
        _ => {
            // Double or halve the prompt, keeping the shared prefix valid.
            let len = if rng.gen_bool(0.5) {
                request.shape.prompt_len.saturating_mul(2).min(8192)
            } else {
                (request.shape.prompt_len / 2).max(1)
            };
            request.shape = PromptShape::new(request.shape.prefix_len.min(len), len);
        }
    }
}

// ---------------------------------------------------------------------------
// Splicing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutPolicy {
    /// Independent uniform cut points in each parent.
    Random,
    /// Both parents cut at their middle event.
    Midpoint,
}

/// Joins `prefix` and `suffix`, renaming ids that appear in both parents,
/// rebasing the suffix to start at `suffix_start`, and dropping orphans.
fn join(
    child_id: String,
    a: &TimedTrace,
    b: &TimedTrace,
    prefix: &[TraceEvent],
    suffix: &[TraceEvent],
    suffix_start: u64,
) -> TimedTrace {
    let ids_a: HashSet<&str> = a.sends().map(|s| s.request_id.as_str()).collect();
    let shared: BTreeSet<String> = b
        .sends()
        .map(|s| s.request_id.as_str())
        .filter(|id| ids_a.contains(id))
        .map(str::to_string)
        .collect();
    let taken: HashSet<String> = a
        .sends()
        .chain(b.sends())
        .map(|s| s.request_id.clone())
        .collect();
    let rename = |id: &str, side: &str| -> String {
        (0u32..)
            .map(|n| {
                if n == 0 {
                    format!("{id}@{side}")
                } else {
                    format!("{id}@{side}{n}")
                }
            })
            .find(|c| !taken.contains(c))
            .expect("unbounded id space")
    };

    let base = suffix.first().map(|e| e.offset_ms).unwrap_or(0);
    let mut events = Vec::with_capacity(prefix.len() + suffix.len());
    for (side, part, shift) in [("a", prefix, None), ("b", suffix, Some(base))] {
        for e in part {
            let mut e = e.clone();
            if let Some(base) = shift {
                e.offset_ms = e.offset_ms - base + suffix_start;
            }
            match &mut e.action {
                EventAction::Send { request } if shared.contains(&request.request_id) => {
                    if request.prompt_family_id.is_none() {
                        request.prompt_family_id = Some(request.request_id.clone());
                    }
                    request.request_id = rename(&request.request_id, side);
                }
                EventAction::Cancel { target } | EventAction::Disconnect { target }
                    if shared.contains(target) =>
                {
                    *target = rename(target, side);
                }
                _ => {}
            }
            events.push(e);
        }
    }
    let mut child = TimedTrace::new(child_id, events);
    child.base_time = a.base_time;
    child.metadata = a.metadata.clone();
    repair(&child)
}

/// Prefix of `a` followed by a suffix of `b`, the suffix rebased to start
/// where the prefix ends.
pub fn splice(a: &TimedTrace, b: &TimedTrace, cut: CutPolicy, rng_seed: u64) -> TimedTrace {
    let mut rng = rng_for(rng_seed);
    let (la, lb) = (a.events.len(), b.events.len());
    let (i, j) = if lb == 0 {
        (la, 0)
    } else if la == 0 {
        (0, 0)
    } else {
        match cut {
            CutPolicy::Random => (rng.gen_range(0..=la), rng.gen_range(0..lb)),
            CutPolicy::Midpoint => (la.div_ceil(2), lb / 2),
        }
    };
    let prefix = &a.events[..i];
    let start = prefix.last().map(|e| e.offset_ms).unwrap_or(0);
    let mut child = join(
        child_id('+', &a.trace_id, &b.trace_id),
        a,
        b,
        prefix,
        &b.events[j..],
        start,
    );
    record_lineage(
        &mut child,
        MutationKind::Splice.as_str(),
        &[&a.trace_id, &b.trace_id],
    );
    child
}

/// Per-window telemetry of one execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySummary {
    pub window_ms: u64,
    /// New KV block allocations per window.
    pub allocs: Vec<u32>,
    /// Peak concurrent in-flight requests per window.
    pub in_flight: Vec<u32>,
}

impl TelemetrySummary {
    pub fn from_report(report: &ExecutionReport, window_ms: u64) -> Self {
        let window_ms = window_ms.max(1);
        let end = report
            .wall_clock_span_ms
            .max(report.last_terminal_ms)
            .max(report.kv_events.iter().map(|e| e.ts).max().unwrap_or(0));
        let n = (end / window_ms + 1) as usize;
        let mut allocs = vec![0u32; n];
        for ev in report
            .kv_events
            .iter()
            .filter(|e| e.kind == KvEventKind::Alloc)
        {
            allocs[((ev.ts / window_ms) as usize).min(n - 1)] += 1;
        }
        // Sweep over request lifetimes.
        let mut points: Vec<(u64, i32)> = report
            .outcomes
            .iter()
            .filter(|o| o.total_ms > 0)
            .flat_map(|o| [(o.dispatch_ms, 1), (o.end_ms(), -1)])
            .collect();
        points.sort_by_key(|(t, d)| (*t, *d));
        let mut in_flight = vec![0u32; n];
        let mut cur = 0i32;
        let mut w = 0usize;
        for (t, d) in points {
            let tw = ((t / window_ms) as usize).min(n - 1);
            while w < tw {
                w += 1;
                in_flight[w] = in_flight[w].max(cur as u32);
            }
            cur += d;
            in_flight[tw] = in_flight[tw].max(cur.max(0) as u32);
        }
        Self {
            window_ms,
            allocs,
            in_flight,
        }
    }

    fn argmax(v: &[u32]) -> usize {
        v.iter()
            .enumerate()
            .max_by_key(|(i, x)| (**x, std::cmp::Reverse(*i)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Start of the window with the most new allocations.
    pub fn warm_window(&self) -> (u64, u64) {
        let w = Self::argmax(&self.allocs) as u64;
        (w * self.window_ms, (w + 1) * self.window_ms)
    }

    /// Window with the most concurrent requests.
    pub fn pressure_window(&self) -> (u64, u64) {
        let w = Self::argmax(&self.in_flight) as u64;
        (w * self.window_ms, (w + 1) * self.window_ms)
    }
}

pub const DEFAULT_SPLICE_GAP_MS: u64 = 50;

/// Places `warm`'s cache-warming window before `pressure`'s high-pressure
/// window: warm's events up to the end of its warming window, then
/// pressure's events from its pressure window onward, starting `gap_ms`
/// later. Without feedback for both parents this is an undirected splice.
pub fn directed_splice(
    warm: &TimedTrace,
    pressure: &TimedTrace,
    warm_feedback: Option<&TelemetrySummary>,
    pressure_feedback: Option<&TelemetrySummary>,
    gap_ms: u64,
    rng_seed: u64,
) -> TimedTrace {
    let (Some(wf), Some(pf)) = (warm_feedback, pressure_feedback) else {
        let mut child = splice(warm, pressure, CutPolicy::Random, rng_seed);
        record_lineage(
            &mut child,
            FALLBACK_LINEAGE,
            &[&warm.trace_id, &pressure.trace_id],
        );
        return child;
    };
    let (_, warm_end) = wf.warm_window();
    let (pressure_start, _) = pf.pressure_window();
    let i = warm.events.partition_point(|e| e.offset_ms < warm_end);
    let j = pressure
        .events
        .partition_point(|e| e.offset_ms < pressure_start);
    let start = warm_end + gap_ms;
    let mut child = join(
        child_id('>', &warm.trace_id, &pressure.trace_id),
        warm,
        pressure,
        &warm.events[..i],
        &pressure.events[j..],
        start,
    );
    child
        .metadata
        .insert("pressure_segment_start_ms".into(), start.to_string());
    record_lineage(
        &mut child,
        MutationKind::DirectedSplice.as_str(),
        &[&warm.trace_id, &pressure.trace_id],
    );
    child
}

// ---------------------------------------------------------------------------
// Selection among operators

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationWeights {
    pub timing: f64,
    pub event: f64,
    pub splice: f64,
    pub directed_splice: f64,
}

impl Default for MutationWeights {
    fn default() -> Self {
        Self {
            timing: 0.35,
            event: 0.35,
            splice: 0.2,
            directed_splice: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationClass {
    Timing,
    Event,
    Splice,
    DirectedSplice,
}

impl MutationWeights {
    pub fn is_valid(&self) -> bool {
        let w = [self.timing, self.event, self.splice, self.directed_splice];
        w.iter().all(|x| x.is_finite() && *x >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-6
    }

    pub fn pick(&self, rng: &mut impl Rng) -> MutationClass {
        let x: f64 =
            rng.gen::<f64>() * (self.timing + self.event + self.splice + self.directed_splice);
        if x < self.timing {
            MutationClass::Timing
        } else if x < self.timing + self.event {
            MutationClass::Event
        } else if x < self.timing + self.event + self.splice {
            MutationClass::Splice
        } else {
            MutationClass::DirectedSplice
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::validate;

    fn send(at: u64, id: &str) -> TraceEvent {
        TraceEvent::send(at, RequestSpec::new(id, PromptShape::new(0, 64)))
    }

    #[test]
    fn filler_seed() {
        let p = SeedProfile {
            kv_filler_count: 11,
            shape_palette: vec![PromptShape::new(0, 4096)],
            n_requests: 0,
            ..SeedProfile::mixed()
        };
        let t = generate_seed(&p, 1);
        assert_eq!(t.events.len(), 11);
        assert!(t
            .events
            .iter()
            .all(|e| e.offset_ms == 0 && e.as_send().unwrap().shape.prompt_len == 4096));
    }

    #[test]
    fn lora_burst_seed() {
        let p = SeedProfile {
            n_requests: 6,
            adapter_palette: vec!["lora_b".into()],
            burst_window_ms: 6,
            kv_filler_count: 0,
            start_ms: 0,
            ..SeedProfile::lora()
        };
        let t = generate_seed(&p, 9);
        assert_eq!(t.send_count(), 6);
        assert!(t.sends().all(|s| s.adapter.as_deref() == Some("lora_b")));
        for w in t.events.windows(2) {
            let gap = w[1].offset_ms - w[0].offset_ms;
            assert!((1..=6).contains(&gap), "{gap}");
        }
        assert_eq!(t, generate_seed(&p, 9));
    }

    #[test]
    fn zero_intensity_is_identity() {
        let t = generate_seed(&SeedProfile::mixed(), 3);
        let m = mutate_timing(&t, 5, 0.0);
        assert_eq!(m.events, t.events);
    }

    #[test]
    fn collapse_aligns_two_sends() {
        let t = TimedTrace::new("t", vec![send(0, "a"), send(500, "b")]);
        let c = collapse(&t, 0);
        assert_eq!(c.events[0].offset_ms, c.events[1].offset_ms);
        assert!(validate(&c).is_ok());
    }

    #[test]
    fn deleting_send_drops_its_cancel() {
        let t = TimedTrace::new("t", vec![send(0, "a"), TraceEvent::cancel(10, "a")]);
        let mut d = t.clone();
        delete_request(&mut d, "a");
        assert!(d.events.is_empty());
    }

    #[test]
    fn splice_with_empty_is_neutral() {
        let t = generate_seed(&SeedProfile::mixed(), 4);
        let s = splice(&t, &TimedTrace::empty("e"), CutPolicy::Random, 1);
        assert_eq!(s.events, t.events);
    }

    #[test]
    fn splice_renames_shared_ids() {
        let a = TimedTrace::new(
            "a",
            vec![send(0, "x"), send(5, "y"), TraceEvent::cancel(9, "x")],
        );
        let b = TimedTrace::new(
            "b",
            vec![send(0, "x"), send(3, "z"), TraceEvent::cancel(4, "x")],
        );
        for seed in 0..50 {
            let c = splice(&a, &b, CutPolicy::Random, seed);
            assert!(validate(&c).is_ok());
            assert!(c.sends().all(|s| s.request_id != "x"));
        }
    }

    #[test]
    fn directed_orders_windows() {
        let warm = TimedTrace::new("w", vec![send(0, "a"), send(1500, "b"), send(2500, "c")]);
        let pressure = TimedTrace::new("p", vec![send(0, "d"), send(10, "e"), send(3000, "f")]);
        let wf = TelemetrySummary {
            window_ms: 1000,
            allocs: vec![5, 50, 1],
            in_flight: vec![1, 1, 1],
        };
        let pf = TelemetrySummary {
            window_ms: 1000,
            allocs: vec![1, 1, 1, 1],
            in_flight: vec![9, 1, 1, 1],
        };
        let c = directed_splice(&warm, &pressure, Some(&wf), Some(&pf), 50, 0);
        let ids: Vec<_> = c.sends().map(|s| s.request_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "d", "e", "f"]);
        assert_eq!(c.find_send("d").map(|_| ()), Some(()));
        let d_at = c
            .events
            .iter()
            .find(|e| e.as_send().is_some_and(|s| s.request_id == "d"))
            .unwrap()
            .offset_ms;
        assert_eq!(d_at, 2050);

        let f = directed_splice(&warm, &pressure, None, Some(&pf), 50, 0);
        assert!(f.metadata[LINEAGE_KEY].contains(FALLBACK_LINEAGE));
    }
}
