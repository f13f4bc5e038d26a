//! Timed request traces: the fuzzing input.
//!
//! A trace is an ordered list of client-side lifecycle events, each at an
//! integer millisecond offset from the start of the trace. `Send` events carry
//! a full [`RequestSpec`]; `Cancel` and `Disconnect` target a previously sent
//! request by its transport id; `Wait` extends the trace without any network
//! activity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{combine, combine_all, hash_str, mix64};

/// Adapter name used when a request does not select a LoRA adapter.
pub const BASE_ADAPTER: &str = "BASE";

/// Default size of the synthetic token vocabulary.
pub const DEFAULT_VOCAB_SIZE: u32 = 1024;

pub type Token = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptShape {
    pub prefix_len: u32,
    pub prompt_len: u32,
}

impl PromptShape {
    pub fn new(prefix_len: u32, prompt_len: u32) -> Self {
        Self {
            prefix_len,
            prompt_len,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.prefix_len <= self.prompt_len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Top-N log-probabilities requested per generated position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<u32>,
    pub n_completions: u32,
}

impl SamplingConfig {
    /// Greedy decoding with a fixed seed.
    pub fn deterministic(max_tokens: u32) -> Self {
        Self {
            max_tokens,
            temperature: 0.0,
            seed: Some(0),
            logprobs: None,
            n_completions: 1,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.temperature == 0.0 && self.seed.is_some()
    }

    fn is_valid(&self) -> bool {
        self.max_tokens > 0
            && self.n_completions > 0
            && self.temperature.is_finite()
            && self.temperature >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_family_id: Option<String>,
    pub shape: PromptShape,
    pub sampling: SamplingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
    #[serde(default)]
    pub stream: bool,
}

impl RequestSpec {
    pub fn new(request_id: impl Into<String>, shape: PromptShape) -> Self {
        Self {
            request_id: request_id.into(),
            prompt_family_id: None,
            shape,
            sampling: SamplingConfig::deterministic(16),
            adapter: None,
            stream: true,
        }
    }

    /// Semantic prompt identity: the family when present, else the transport id.
    pub fn prompt_identity(&self) -> &str {
        self.prompt_family_id.as_deref().unwrap_or(&self.request_id)
    }

    pub fn adapter_name(&self) -> &str {
        self.adapter.as_deref().unwrap_or(BASE_ADAPTER)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Send,
    Cancel,
    Disconnect,
    Wait,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::Send => "send",
            EventKind::Cancel => "cancel",
            EventKind::Disconnect => "disconnect",
            EventKind::Wait => "wait",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventAction {
    Send { request: RequestSpec },
    Cancel { target: String },
    Disconnect { target: String },
    Wait { duration_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub offset_ms: u64,
    #[serde(flatten)]
    pub action: EventAction,
}

impl TraceEvent {
    pub fn send(offset_ms: u64, request: RequestSpec) -> Self {
        Self {
            offset_ms,
            action: EventAction::Send { request },
        }
    }

    pub fn cancel(offset_ms: u64, target: impl Into<String>) -> Self {
        Self {
            offset_ms,
            action: EventAction::Cancel {
                target: target.into(),
            },
        }
    }

    pub fn disconnect(offset_ms: u64, target: impl Into<String>) -> Self {
        Self {
            offset_ms,
            action: EventAction::Disconnect {
                target: target.into(),
            },
        }
    }

    pub fn wait(offset_ms: u64, duration_ms: u64) -> Self {
        Self {
            offset_ms,
            action: EventAction::Wait { duration_ms },
        }
    }

    pub fn kind(&self) -> EventKind {
        match self.action {
            EventAction::Send { .. } => EventKind::Send,
            EventAction::Cancel { .. } => EventKind::Cancel,
            EventAction::Disconnect { .. } => EventKind::Disconnect,
            EventAction::Wait { .. } => EventKind::Wait,
        }
    }

    pub fn as_send(&self) -> Option<&RequestSpec> {
        match &self.action {
            EventAction::Send { request } => Some(request),
            _ => None,
        }
    }

    /// Target of a Cancel or Disconnect.
    pub fn control_target(&self) -> Option<&str> {
        match &self.action {
            EventAction::Cancel { target } | EventAction::Disconnect { target } => Some(target),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedTrace {
    pub trace_id: String,
    #[serde(default)]
    pub base_time: u64,
    pub events: Vec<TraceEvent>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl TimedTrace {
    pub fn new(trace_id: impl Into<String>, events: Vec<TraceEvent>) -> Self {
        Self {
            trace_id: trace_id.into(),
            base_time: 0,
            events,
            metadata: BTreeMap::new(),
        }
    }

    pub fn empty(trace_id: impl Into<String>) -> Self {
        Self::new(trace_id, Vec::new())
    }

    pub fn sends(&self) -> impl Iterator<Item = &RequestSpec> {
        self.events.iter().filter_map(TraceEvent::as_send)
    }

    pub fn send_count(&self) -> usize {
        self.sends().count()
    }

    pub fn find_send(&self, request_id: &str) -> Option<&RequestSpec> {
        self.sends().find(|r| r.request_id == request_id)
    }

    /// Offset of the last event, counting Wait durations.
    pub fn span_ms(&self) -> u64 {
        self.events
            .iter()
            .map(|e| match e.action {
                EventAction::Wait { duration_ms } => e.offset_ms + duration_ms,
                _ => e.offset_ms,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }
}

// ---------------------------------------------------------------------------
// Prompt synthesis

/// Deterministic prompt generator.
///
/// The first `prefix_len` tokens depend only on `prefix_len` and the corpus
/// seed, so any two requests with equal `prefix_len` share exactly that
/// prefix. The suffix depends on the prompt identity and the full shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSynthesizer {
    pub corpus_seed: u64,
    pub vocab_size: u32,
}

const PREFIX_DOMAIN: u64 = 0x5052_4546_4958_0001;
const SUFFIX_DOMAIN: u64 = 0x5355_4646_4958_0002;

impl Default for PromptSynthesizer {
    fn default() -> Self {
        Self {
            corpus_seed: 0,
            vocab_size: DEFAULT_VOCAB_SIZE,
        }
    }
}

impl PromptSynthesizer {
    pub fn new(corpus_seed: u64) -> Self {
        Self {
            corpus_seed,
            ..Self::default()
        }
    }

    pub fn synthesize(&self, shape: PromptShape, identity: &str) -> Vec<Token> {
        let vocab = u64::from(self.vocab_size.max(1));
        let prefix_len = shape.prefix_len.min(shape.prompt_len);
        let mut tokens = Vec::with_capacity(shape.prompt_len as usize);

        let mut chain = combine_all(self.corpus_seed ^ PREFIX_DOMAIN, &[u64::from(prefix_len)]);
        for _ in 0..prefix_len {
            chain = mix64(chain);
            tokens.push((chain % vocab) as Token);
        }

        let mut chain = combine_all(
            self.corpus_seed ^ SUFFIX_DOMAIN,
            &[
                hash_str(identity),
                u64::from(shape.prefix_len),
                u64::from(shape.prompt_len),
            ],
        );
        for i in prefix_len..shape.prompt_len {
            chain = combine(chain, u64::from(i));
            tokens.push((chain % vocab) as Token);
        }
        tokens
    }

    pub fn synthesize_request(&self, request: &RequestSpec) -> Vec<Token> {
        self.synthesize(request.shape, request.prompt_identity())
    }
}

/// Convenience wrapper around [`PromptSynthesizer::synthesize`].
pub fn synthesize_prompt(shape: PromptShape, identity: &str, corpus_seed: u64) -> Vec<Token> {
    PromptSynthesizer::new(corpus_seed).synthesize(shape, identity)
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh",
];
const VOWELS: [&str; 8] = ["a", "e", "i", "o", "u", "ai", "ou", "ea"];

/// Printable word-like spelling of a synthetic token id.
pub fn token_text(token: Token) -> String {
    let mut h = mix64(u64::from(token) ^ 0x544F_4B45_4E00);
    let syllables = 1 + (h % 3) as usize;
    let mut word = String::new();
    for _ in 0..syllables {
        h = mix64(h);
        word.push_str(ONSETS[(h % 16) as usize]);
        word.push_str(VOWELS[((h >> 8) % 8) as usize]);
    }
    word
}

// ---------------------------------------------------------------------------
// Validation and repair

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    OutOfOrder {
        index: usize,
        offset_ms: u64,
        previous_ms: u64,
    },
    DuplicateRequestId {
        index: usize,
        request_id: String,
    },
    OrphanedControl {
        index: usize,
        target: String,
    },
    ZeroWait {
        index: usize,
    },
    InvalidShape {
        index: usize,
    },
    InvalidSampling {
        index: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OutOfOrder {
                index,
                offset_ms,
                previous_ms,
            } => write!(
                f,
                "event {index}: offset {offset_ms} ms precedes previous offset {previous_ms} ms"
            ),
            Violation::DuplicateRequestId { index, request_id } => {
                write!(f, "event {index}: duplicate transport id '{request_id}'")
            }
            Violation::OrphanedControl { index, target } => {
                write!(
                    f,
                    "event {index}: orphaned control event targeting '{target}'"
                )
            }
            Violation::ZeroWait { index } => write!(f, "event {index}: wait with zero duration"),
            Violation::InvalidShape { index } => {
                write!(f, "event {index}: prefix_len exceeds prompt_len")
            }
            Violation::InvalidSampling { index } => {
                write!(f, "event {index}: invalid sampling config")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate(trace: &TimedTrace) -> ValidationReport {
    let mut violations = Vec::new();
    let mut sent: HashSet<&str> = HashSet::new();
    let mut previous = 0u64;

    for (index, event) in trace.events.iter().enumerate() {
        if event.offset_ms < previous {
            violations.push(Violation::OutOfOrder {
                index,
                offset_ms: event.offset_ms,
                previous_ms: previous,
            });
        }
        previous = previous.max(event.offset_ms);

        match &event.action {
            EventAction::Send { request } => {
                if !sent.insert(request.request_id.as_str()) {
                    violations.push(Violation::DuplicateRequestId {
                        index,
                        request_id: request.request_id.clone(),
                    });
                }
                if !request.shape.is_valid() {
                    violations.push(Violation::InvalidShape { index });
                }
                if !request.sampling.is_valid() {
                    violations.push(Violation::InvalidSampling { index });
                }
            }
            EventAction::Cancel { target } | EventAction::Disconnect { target } => {
                if !sent.contains(target.as_str()) {
                    violations.push(Violation::OrphanedControl {
                        index,
                        target: target.clone(),
                    });
                }
            }
            EventAction::Wait { duration_ms } => {
                if *duration_ms == 0 {
                    violations.push(Violation::ZeroWait { index });
                }
            }
        }
    }
    ValidationReport { violations }
}

/// Returns a trace that passes [`validate`].
///
/// Sorts by offset (stable), renames duplicate transport ids, clamps invalid
/// shapes/sampling/waits, and drops orphaned Cancel/Disconnect events. Sends
/// and Waits are never dropped.
pub fn repair(trace: &TimedTrace) -> TimedTrace {
    let mut out = trace.clone();
    out.events.sort_by_key(|e| e.offset_ms);

    let mut taken: HashSet<String> = out.sends().map(|r| r.request_id.clone()).collect();
    let mut seen: HashSet<String> = HashSet::new();
    let mut kept = Vec::with_capacity(out.events.len());

    for mut event in out.events.drain(..) {
        match &mut event.action {
            EventAction::Send { request } => {
                if !seen.insert(request.request_id.clone()) {
                    let fresh = fresh_id(&request.request_id, &taken);
                    taken.insert(fresh.clone());
                    if request.prompt_family_id.is_none() {
                        request.prompt_family_id = Some(request.request_id.clone());
                    }
                    request.request_id = fresh.clone();
                    seen.insert(fresh);
                }
                if !request.shape.is_valid() {
                    request.shape.prefix_len = request.shape.prompt_len;
                }
                let s = &mut request.sampling;
                s.max_tokens = s.max_tokens.max(1);
                s.n_completions = s.n_completions.max(1);
                if !s.temperature.is_finite() || s.temperature < 0.0 {
                    s.temperature = 0.0;
                }
                kept.push(event);
            }
            EventAction::Cancel { target } | EventAction::Disconnect { target } => {
                if seen.contains(target.as_str()) {
                    kept.push(event);
                }
            }
            EventAction::Wait { duration_ms } => {
                *duration_ms = (*duration_ms).max(1);
                kept.push(event);
            }
        }
    }
    out.events = kept;
    out
}

fn fresh_id(base: &str, taken: &HashSet<String>) -> String {
    (1u32..)
        .map(|n| format!("{base}~{n}"))
        .find(|c| !taken.contains(c))
        .expect("unbounded id space")
}

/// Renames every transport id using `rename`, keeping prompt content stable by
/// pinning the old id as the prompt family when none was set.
pub fn refresh_request_ids(trace: &mut TimedTrace, mut rename: impl FnMut(usize) -> String) {
    let mut mapping: HashMap<String, String> = HashMap::new();
    let mut n = 0usize;
    for event in &mut trace.events {
        match &mut event.action {
            EventAction::Send { request } => {
                let fresh = rename(n);
                n += 1;
                if request.prompt_family_id.is_none() {
                    request.prompt_family_id = Some(request.request_id.clone());
                }
                mapping.insert(request.request_id.clone(), fresh.clone());
                request.request_id = fresh;
            }
            EventAction::Cancel { target } | EventAction::Disconnect { target } => {
                if let Some(new) = mapping.get(target.as_str()) {
                    *target = new.clone();
                } else {
                    // Dangling; make sure it cannot alias a renamed id.
                    *target = format!("{target}#orphan");
                }
            }
            EventAction::Wait { .. } => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization

#[derive(Debug, Error)]
pub enum TraceFormatError {
    #[error("malformed trace document at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("failed to encode trace: {0}")]
    Encode(String),
}

pub fn serialize(trace: &TimedTrace) -> Result<Vec<u8>, TraceFormatError> {
    let mut bytes =
        serde_json::to_vec_pretty(trace).map_err(|e| TraceFormatError::Encode(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn deserialize(bytes: &[u8]) -> Result<TimedTrace, TraceFormatError> {
    serde_json::from_slice(bytes).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        TraceFormatError::Parse {
            offset: byte_offset(bytes, line, column),
            line,
            column,
            message: e.to_string(),
        }
    })
}

/// Converts serde_json's 1-based line/column to a byte offset.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut current = 1usize;
    let mut start = 0usize;
    for (i, b) in bytes.iter().enumerate() {
        if current == line {
            break;
        }
        if *b == b'\n' {
            current += 1;
            start = i + 1;
        }
    }
    (start + column.saturating_sub(1)).min(bytes.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn send(offset: u64, id: &str) -> TraceEvent {
        TraceEvent::send(offset, RequestSpec::new(id, PromptShape::new(16, 32)))
    }

    #[test]
    fn prompt_is_deterministic() {
        let shape = PromptShape::new(64, 128);
        assert_eq!(
            synthesize_prompt(shape, "fam", 7),
            synthesize_prompt(shape, "fam", 7)
        );
        assert_eq!(synthesize_prompt(shape, "fam", 7).len(), 128);
    }

    #[test]
    fn families_share_prefix_only() {
        let shape = PromptShape::new(64, 128);
        let a = synthesize_prompt(shape, "A", 0);
        let b = synthesize_prompt(shape, "B", 0);
        assert_eq!(a[..64], b[..64]);
        assert_ne!(a[64..], b[64..]);
        assert_ne!(a[64], b[64]);
    }

    #[test]
    fn request_id_fallback_makes_prompts_unique() {
        let shape = PromptShape::new(64, 128);
        let r1 = RequestSpec::new("r1", shape);
        let r2 = RequestSpec::new("r2", shape);
        let synth = PromptSynthesizer::default();
        let (p1, p2) = (synth.synthesize_request(&r1), synth.synthesize_request(&r2));
        assert_eq!(p1[..64], p2[..64]);
        assert_ne!(p1[64..], p2[64..]);
    }

    #[test]
    fn prefix_depends_on_prefix_len_not_prompt_len() {
        let a = synthesize_prompt(PromptShape::new(32, 64), "x", 3);
        let b = synthesize_prompt(PromptShape::new(32, 4096), "y", 3);
        assert_eq!(a[..32], b[..32]);
        let c = synthesize_prompt(PromptShape::new(48, 64), "x", 3);
        assert_ne!(a[..32], c[..32]);
    }

    #[test]
    fn corpus_seed_changes_prefix() {
        let shape = PromptShape::new(16, 16);
        assert_ne!(
            synthesize_prompt(shape, "f", 1),
            synthesize_prompt(shape, "f", 2)
        );
    }

    #[test]
    fn token_text_is_printable() {
        for t in 0..64 {
            let w = token_text(t);
            assert!(!w.is_empty() && w.chars().all(|c| c.is_ascii_lowercase()));
        }
    }

    #[test]
    fn empty_trace_is_valid() {
        assert!(validate(&TimedTrace::empty("t")).is_ok());
    }

    #[test]
    fn orphaned_cancel_reported() {
        let t = TimedTrace::new("t", vec![TraceEvent::cancel(10, "ghost")]);
        let report = validate(&t);
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0]
            .to_string()
            .contains("orphaned control event"));
    }

    #[test]
    fn duplicate_send_reported() {
        let t = TimedTrace::new("t", vec![send(0, "r"), send(5, "r")]);
        let report = validate(&t);
        assert!(matches!(
            report.violations.as_slice(),
            [Violation::DuplicateRequestId { index: 1, .. }]
        ));
        assert!(report.violations[0]
            .to_string()
            .contains("duplicate transport id"));
    }

    #[test]
    fn cancel_before_send_is_orphaned() {
        let t = TimedTrace::new("t", vec![TraceEvent::cancel(0, "r"), send(0, "r")]);
        assert!(!validate(&t).is_ok());
    }

    #[test]
    fn repair_drops_orphans() {
        let t = TimedTrace::new("t", vec![send(0, "a"), TraceEvent::cancel(10, "ghost")]);
        let fixed = repair(&t);
        assert_eq!(fixed.events, vec![send(0, "a")]);
        assert!(validate(&fixed).is_ok());
    }

    #[test]
    fn repair_is_identity_on_valid() {
        let t = TimedTrace::new(
            "t",
            vec![
                send(0, "a"),
                TraceEvent::wait(1, 5),
                TraceEvent::disconnect(9, "a"),
            ],
        );
        assert_eq!(repair(&t), t);
    }

    #[test]
    fn repair_sorts() {
        let t = TimedTrace::new(
            "t",
            vec![send(20, "b"), send(5, "a"), TraceEvent::wait(10, 3)],
        );
        let fixed = repair(&t);
        let offsets: Vec<_> = fixed.events.iter().map(|e| e.offset_ms).collect();
        assert_eq!(offsets, vec![5, 10, 20]);
        assert_eq!(fixed.events.len(), t.events.len());
    }

    #[test]
    fn repair_renames_duplicates_and_keeps_prompt() {
        let t = TimedTrace::new("t", vec![send(0, "r"), send(1, "r")]);
        let fixed = repair(&t);
        assert!(validate(&fixed).is_ok());
        let second = fixed.events[1].as_send().unwrap();
        assert_eq!(second.request_id, "r~1");
        assert_eq!(second.prompt_identity(), "r");
    }

    #[test]
    fn repair_fixes_zero_wait_and_bad_shape() {
        let mut bad = RequestSpec::new("a", PromptShape::new(64, 16));
        bad.sampling.max_tokens = 0;
        let t = TimedTrace::new("t", vec![TraceEvent::send(0, bad), TraceEvent::wait(0, 0)]);
        assert!(!validate(&t).is_ok());
        assert!(validate(&repair(&t)).is_ok());
    }

    #[test]
    fn all_kinds_round_trip() {
        let t = TimedTrace::new(
            "trace-1",
            vec![
                send(0, "a"),
                TraceEvent::wait(1, 4),
                TraceEvent::cancel(2, "a"),
                send(3, "b"),
                TraceEvent::disconnect(9, "b"),
            ],
        );
        let bytes = serialize(&t).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        for field in [
            "\"trace_id\"",
            "\"base_time\"",
            "\"events\"",
            "\"offset_ms\"",
            "\"kind\": \"cancel\"",
            "\"metadata\"",
        ] {
            assert!(text.contains(field), "missing {field}");
        }
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(serialize(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_document_reports_offset() {
        let t = TimedTrace::new("t", vec![send(0, "a")]);
        let bytes = serialize(&t).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        match deserialize(cut) {
            Err(TraceFormatError::Parse { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
        let err = deserialize(b"{\"trace_id\": 5}").unwrap_err();
        assert!(err.to_string().contains("byte"));
    }
}
