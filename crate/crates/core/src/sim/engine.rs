//! Single-owner simulator state machine, advanced one scheduler tick at a time.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::blocks::{BlockCounters, BlockId, BlockManager};
use super::config::{FaultSpec, SimConfig};
use super::decode::{digest_seed, pseudo_decode, roll, DecodeParams, MAX_CANDIDATES};
use crate::hashing::{combine, combine_all, hash_str, mix64, unit_f64};
use crate::report::{CrashEvidence, KvEvent, TokenLogprob};
use crate::trace::{Token, BASE_ADAPTER};

const LOG_CAPACITY: usize = 32;
const FLIP_DOMAIN: u64 = 0x464C_4950;
const DECODE_DOMAIN: u64 = 0x4445_434F_4445;

pub const CRASH_ASSERTION: &str =
    "assertion failed: running_loras within loaded_loras and max_loras_per_batch";

#[derive(Debug, Clone, PartialEq)]
pub struct EngineRequest {
    pub id: String,
    pub prompt: Vec<Token>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub logprobs: Option<u32>,
    pub n: u32,
    pub adapter: Option<String>,
    pub arrival_ms: u64,
}

impl EngineRequest {
    fn adapter_name(&self) -> &str {
        self.adapter.as_deref().unwrap_or(BASE_ADAPTER)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmission {
    pub request_id: String,
    pub completion: u32,
    pub token: Token,
    pub logprobs: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    pub tick: u64,
    pub start_ms: u64,
    pub end_ms: u64,
    pub tokens: Vec<TokenEmission>,
    pub finished: Vec<String>,
    pub crashed: bool,
}

/// The four adapter-drift trigger conditions, as a bitmask.
pub mod drift_condition {
    pub const ADAPTER_MIX: u8 = 1;
    pub const LORA_BURST: u8 = 2;
    pub const LOAD_IN_FLIGHT: u8 = 4;
    pub const HIGH_OCCUPANCY: u8 = 8;
    pub const ALL: u8 = 15;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimTelemetry {
    pub ticks: u64,
    pub stalled_ticks: u64,
    pub stale_contaminations: u64,
    /// Distinct drift-condition masks observed at tick granularity.
    pub drift_masks: BTreeSet<u8>,
    pub peak_held_blocks: u32,
    pub held_blocks: u32,
    pub allocs: u64,
    pub frees: u64,
    pub evicts: u64,
    pub reuses: u64,
    pub prefix_hits: u64,
}

/// Snapshot of scheduler queues and adapter bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub waiting: Vec<String>,
    pub running: Vec<String>,
    pub running_adapters: BTreeSet<String>,
    pub loaded_adapters: BTreeSet<String>,
    pub loading_adapters: BTreeSet<String>,
    pub decode_cursors: BTreeMap<String, u32>,
}

#[derive(Debug, Clone)]
struct Completion {
    digest: u64,
    tokens: u32,
}

#[derive(Debug, Clone)]
struct Active {
    req: EngineRequest,
    adapter: String,
    prompt_blocks: Vec<BlockId>,
    decode_blocks: Vec<BlockId>,
    prefill_remaining: u32,
    completions: Vec<Completion>,
    sampling_seed: u64,
}

impl Active {
    fn in_decode(&self) -> bool {
        self.prefill_remaining == 0
    }

    fn done(&self) -> bool {
        self.completions
            .iter()
            .all(|c| c.tokens >= self.req.max_tokens)
    }

    fn cursor(&self) -> u32 {
        self.completions.iter().map(|c| c.tokens).min().unwrap_or(0)
    }
}

/// Planned prefix lookup for one admission.
struct Admission {
    req: EngineRequest,
    hashes: Vec<(u64, bool)>,
    hits: Vec<BlockId>,
}

pub struct SimCore {
    cfg: SimConfig,
    params: DecodeParams,
    blocks: BlockManager,
    waiting: VecDeque<EngineRequest>,
    running: Vec<Active>,
    loaded: BTreeSet<String>,
    loading: BTreeMap<String, u32>,
    adapter_last_used: HashMap<String, u64>,
    now_ms: u64,
    tick: u64,
    crashed: Option<CrashEvidence>,
    pending_crash: Option<u64>,
    drifted: bool,
    burst_arrivals: HashMap<String, VecDeque<u64>>,
    burst_flag: bool,
    log: VecDeque<String>,
    kv_events: Vec<KvEvent>,
    telemetry: SimTelemetry,
    submitted: u64,
}

impl SimCore {
    pub fn new(cfg: SimConfig) -> Self {
        let params = DecodeParams {
            vocab_size: cfg.vocab_size,
            gap_min: cfg.logprob_gap_min,
            near_tie_gap: cfg.near_tie.map(|n| n.gap),
        };
        Self {
            blocks: BlockManager::new(cfg.total_kv_blocks),
            params,
            cfg,
            waiting: VecDeque::new(),
            running: Vec::new(),
            loaded: BTreeSet::new(),
            loading: BTreeMap::new(),
            adapter_last_used: HashMap::new(),
            now_ms: 0,
            tick: 0,
            crashed: None,
            pending_crash: None,
            drifted: false,
            burst_arrivals: HashMap::new(),
            burst_flag: false,
            log: VecDeque::new(),
            kv_events: Vec::new(),
            telemetry: SimTelemetry::default(),
            submitted: 0,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Returns the engine to launch state.
    pub fn reset(&mut self) {
        *self = SimCore::new(self.cfg.clone());
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    /// Moves the clock forward without running the scheduler.
    pub fn advance_to(&mut self, ms: u64) {
        self.now_ms = self.now_ms.max(ms);
    }

    pub fn crash(&self) -> Option<&CrashEvidence> {
        self.crashed.as_ref()
    }

    pub fn is_alive(&self) -> bool {
        self.crashed.is_none()
    }

    pub fn is_idle(&self) -> bool {
        self.waiting.is_empty() && self.running.is_empty()
    }

    pub fn held_blocks(&self) -> u32 {
        self.blocks.held()
    }

    pub fn occupancy(&self) -> f64 {
        self.blocks.occupancy()
    }

    pub fn block_counters(&self) -> BlockCounters {
        self.blocks.counters()
    }

    pub fn drain_kv_events(&mut self) -> Vec<KvEvent> {
        self.collect_block_events();
        std::mem::take(&mut self.kv_events)
    }

    pub fn telemetry(&self) -> SimTelemetry {
        let c = self.blocks.counters();
        SimTelemetry {
            held_blocks: self.blocks.held(),
            allocs: c.allocs,
            frees: c.frees,
            evicts: c.evicts,
            reuses: c.reuses,
            prefix_hits: c.prefix_hits,
            ..self.telemetry.clone()
        }
    }

    pub fn recent_log(&self) -> Vec<String> {
        self.log.iter().cloned().collect()
    }

    pub fn scheduler_state(&self) -> SchedulerState {
        SchedulerState {
            waiting: self.waiting.iter().map(|r| r.id.clone()).collect(),
            running: self.running.iter().map(|a| a.req.id.clone()).collect(),
            running_adapters: self.running_loras(),
            loaded_adapters: self.loaded.clone(),
            loading_adapters: self.loading.keys().cloned().collect(),
            decode_cursors: self
                .running
                .iter()
                .map(|a| (a.req.id.clone(), a.cursor()))
                .collect(),
        }
    }

    pub fn has_request(&self, id: &str) -> bool {
        self.waiting.iter().any(|r| r.id == id) || self.running.iter().any(|a| a.req.id == id)
    }

    pub fn is_known_adapter(&self, adapter: &str) -> bool {
        adapter == BASE_ADAPTER || self.cfg.known_adapters.iter().any(|a| a == adapter)
    }

    /// Queues a request. Errors are per-request server errors.
    pub fn submit(&mut self, req: EngineRequest) -> Result<(), String> {
        if let Some(crash) = &self.crashed {
            return Err(format!(
                "connection refused: engine down ({})",
                crash.detail
            ));
        }
        let adapter = req.adapter_name().to_string();
        if !self.is_known_adapter(&adapter) {
            return Err(format!("unknown adapter '{adapter}'"));
        }
        let bs = self.cfg.block_size_tokens;
        let needed =
            blocks_for(req.prompt.len() as u32, bs) + req.n.max(1) * blocks_for(req.max_tokens, bs);
        if needed > self.cfg.total_kv_blocks {
            return Err(format!(
                "request needs {needed} KV blocks, engine has {}",
                self.cfg.total_kv_blocks
            ));
        }
        if adapter != BASE_ADAPTER {
            self.note_lora_arrival(&adapter, req.arrival_ms);
        }
        self.submitted += 1;
        self.waiting.push_back(req);
        Ok(())
    }

    /// Removes a request wherever it is; returns false if unknown.
    pub fn cancel(&mut self, id: &str) -> bool {
        if let Some(pos) = self.waiting.iter().position(|r| r.id == id) {
            self.waiting.remove(pos);
            return true;
        }
        if let Some(pos) = self.running.iter().position(|a| a.req.id == id) {
            let active = self.running.remove(pos);
            self.release(&active);
            self.collect_block_events();
            return true;
        }
        false
    }

    fn note_lora_arrival(&mut self, adapter: &str, at: u64) {
        let Some(FaultSpec::AdapterDrift {
            burst_count,
            burst_window_ms,
            ..
        }) = self.cfg.adapter_drift().cloned()
        else {
            return;
        };
        let q = self.burst_arrivals.entry(adapter.to_string()).or_default();
        q.push_back(at);
        while q.front().is_some_and(|t| *t + burst_window_ms < at) {
            q.pop_front();
        }
        if q.len() as u32 >= burst_count {
            self.burst_flag = true;
        }
    }

    fn running_loras(&self) -> BTreeSet<String> {
        self.running
            .iter()
            .filter(|a| a.adapter != BASE_ADAPTER)
            .map(|a| a.adapter.clone())
            .collect()
    }

    fn collect_block_events(&mut self) {
        let events = self.blocks.drain_events();
        self.kv_events.extend(events);
    }

    fn push_log(&mut self, line: String) {
        if self.log.len() == LOG_CAPACITY {
            self.log.pop_front();
        }
        self.log.push_back(line);
    }

    /// Advances the engine by one scheduler tick.
    pub fn step(&mut self) -> StepOutput {
        let start = self.now_ms;
        let mut out = StepOutput {
            tick: self.tick,
            start_ms: start,
            end_ms: start,
            ..StepOutput::default()
        };
        if self.crashed.is_some() {
            out.crashed = true;
            return out;
        }
        if self.pending_crash.is_some_and(|due| self.tick >= due) {
            self.fire_crash();
            out.crashed = true;
            return out;
        }

        self.progress_loads();
        let admitted = self.admit(start);
        self.evaluate_drift();

        let mut duration = self.cfg.tick_ms;
        if let Some((threshold, stall_ms)) = self.cfg.engine_stall() {
            if self.running.iter().any(|a| a.req.n >= threshold) {
                duration += stall_ms;
                self.telemetry.stalled_ticks += 1;
            }
        }
        let end = start + duration;
        out.end_ms = end;

        let prefill_tokens = self.run_prefill();
        out.tokens = self.run_decode();
        out.finished = self.finish(end);

        self.collect_block_events();
        self.telemetry.ticks += 1;
        self.telemetry.peak_held_blocks = self.telemetry.peak_held_blocks.max(self.blocks.held());
        let line = format!(
            "tick {} @{}ms: admitted={} running={} waiting={} loras={:?} prefill_tokens={} decode_tokens={} held={}/{}",
            self.tick,
            start,
            admitted,
            self.running.len() + out.finished.len(),
            self.waiting.len(),
            self.running_loras(),
            prefill_tokens,
            out.tokens.len(),
            self.blocks.held(),
            self.blocks.total()
        );
        self.push_log(line);

        self.tick += 1;
        self.now_ms = end;
        out
    }

    fn fire_crash(&mut self) {
        let detail = format!("{CRASH_ASSERTION} (scheduler tick {})", self.tick);
        self.push_log(format!("tick {} @{}ms: {detail}", self.tick, self.now_ms));
        self.crashed = Some(CrashEvidence {
            at_ms: self.now_ms,
            detail,
            recent_log: self.recent_log(),
        });
        self.waiting.clear();
        self.running.clear();
        self.pending_crash = None;
    }

    fn progress_loads(&mut self) {
        let mut done = Vec::new();
        for (name, left) in self.loading.iter_mut() {
            *left = left.saturating_sub(1);
            if *left == 0 {
                done.push(name.clone());
            }
        }
        for name in done {
            self.loading.remove(&name);
            self.loaded.insert(name);
        }
    }

    /// Starts loading `adapter` if a slot can be found. Returns false otherwise.
    fn start_load(&mut self, adapter: &str) -> bool {
        if self.loading.contains_key(adapter) {
            return true;
        }
        let cap = self.cfg.max_loaded_loras as usize;
        if self.loaded.len() + self.loading.len() >= cap {
            let busy = self.running_loras();
            let victim = self
                .loaded
                .iter()
                .filter(|a| !busy.contains(*a))
                .min_by_key(|a| {
                    (
                        self.adapter_last_used.get(*a).copied().unwrap_or(0),
                        (*a).clone(),
                    )
                })
                .cloned();
            match victim {
                Some(v) => {
                    self.loaded.remove(&v);
                }
                None => return false,
            }
        }
        self.loading
            .insert(adapter.to_string(), self.cfg.adapter_load_ticks.max(1));
        true
    }

    fn prompt_hashes(&self, req: &EngineRequest) -> Vec<(u64, bool)> {
        let bs = self.cfg.block_size_tokens as usize;
        let mut h = super::decode::adapter_tag(req.adapter_name());
        req.prompt
            .chunks(bs)
            .map(|chunk| {
                h = chunk.iter().fold(h, |acc, t| combine(acc, u64::from(*t)));
                (h, chunk.len() == bs)
            })
            .collect()
    }

    fn lookup_hits(&self, hashes: &[(u64, bool)]) -> Vec<BlockId> {
        hashes
            .iter()
            .map_while(|(h, full)| if *full { self.blocks.lookup(*h) } else { None })
            .collect()
    }

    fn admit(&mut self, now: u64) -> usize {
        let bs = self.cfg.block_size_tokens;
        let race = self
            .cfg
            .stale_kv()
            .is_some_and(|threshold| self.blocks.occupancy() > threshold);

        // In racy mode admissions are only planned here; otherwise each one
        // looks up, pins and allocates before the next is considered.
        let mut planned: Vec<Admission> = Vec::new();
        let mut admitted = 0usize;
        let mut loras: BTreeSet<String> = self.running_loras();
        let mut budget = self.blocks.free_count();
        let mut revived: BTreeSet<BlockId> = BTreeSet::new();
        let mut i = 0;
        while i < self.waiting.len() {
            if self.running.len() + planned.len() >= self.cfg.max_running_requests as usize {
                break;
            }
            let adapter = self.waiting[i].adapter_name().to_string();
            if adapter != BASE_ADAPTER {
                if !self.loaded.contains(&adapter) {
                    self.start_load(&adapter);
                    i += 1;
                    continue;
                }
                if !loras.contains(&adapter) && loras.len() >= self.cfg.max_loras_per_batch as usize
                {
                    i += 1;
                    continue;
                }
            }
            let req = &self.waiting[i];
            let hashes = self.prompt_hashes(req);
            let hits = self.lookup_hits(&hashes);
            let fresh = hashes.len() as u32 - hits.len() as u32
                + req.n.max(1) * blocks_for(req.max_tokens, bs);
            let revive = hits
                .iter()
                .filter(|b| self.blocks.is_free(**b) && !revived.contains(*b))
                .count() as u32;
            let available = if race {
                budget
            } else {
                self.blocks.free_count()
            };
            if fresh + revive > available {
                // FCFS: capacity blocks everything behind the head.
                break;
            }
            if adapter != BASE_ADAPTER {
                loras.insert(adapter.clone());
            }
            let req = self.waiting.remove(i).expect("index in range");
            let adm = Admission { req, hashes, hits };
            admitted += 1;
            if race {
                budget -= fresh + revive;
                revived.extend(adm.hits.iter().copied().filter(|b| self.blocks.is_free(*b)));
                planned.push(adm);
            } else {
                self.admit_atomic(adm, now);
            }
        }

        if planned.len() >= 2 {
            self.admit_racy(planned, now);
        } else {
            for adm in planned {
                self.admit_atomic(adm, now);
            }
        }
        admitted
    }

    fn admit_atomic(&mut self, adm: Admission, now: u64) {
        let Admission { req, hashes, hits } = adm;
        let adapter = req.adapter_name().to_string();
        let mut prompt_blocks = Vec::with_capacity(hashes.len());
        for (j, (h, full)) in hashes.iter().enumerate() {
            if let Some(b) = hits.get(j) {
                self.blocks.attach(*b, &req.id, &adapter, *h, now);
                prompt_blocks.push(*b);
            } else {
                let b = self
                    .blocks
                    .allocate(&req.id, &adapter, *h, *full, now)
                    .expect("admission checked capacity");
                prompt_blocks.push(b);
            }
        }
        let digest = digest_seed(&adapter);
        let digest = req.prompt.iter().fold(digest, |d, t| roll(d, *t));
        self.activate(req, adapter, prompt_blocks, hits.len(), digest, now);
    }

    /// Lookup, allocation and pinning as three separate passes over the
    /// tick's admissions. A looked-up block can be popped from the free queue
    /// by a later allocation before it is pinned; the pin does not re-check
    /// the block's content.
    fn admit_racy(&mut self, planned: Vec<Admission>, now: u64) {
        let bs = self.cfg.block_size_tokens as usize;
        let mut tables: Vec<Vec<Option<BlockId>>> = Vec::with_capacity(planned.len());
        for adm in &planned {
            let adapter = adm.req.adapter_name().to_string();
            let mut table = Vec::with_capacity(adm.hashes.len());
            for (j, (h, full)) in adm.hashes.iter().enumerate() {
                if j < adm.hits.len() {
                    table.push(None);
                } else {
                    let b = self
                        .blocks
                        .allocate(&adm.req.id, &adapter, *h, *full, now)
                        .expect("admission checked capacity");
                    table.push(Some(b));
                }
            }
            tables.push(table);
        }

        for (slot, (adm, table)) in planned.into_iter().zip(tables).enumerate() {
            let Admission { req, hashes, hits } = adm;
            let adapter = req.adapter_name().to_string();
            let mut prompt_blocks = Vec::with_capacity(hashes.len());
            let mut digest = digest_seed(&adapter);
            let mut contaminated = 0u64;
            for (j, chunk) in req.prompt.chunks(bs).enumerate() {
                let (expected, _) = hashes[j];
                let b = match table[j] {
                    Some(b) => b,
                    None => {
                        let b = hits[j];
                        let stale = self.blocks.block(b).content_hash != expected;
                        self.blocks.attach(b, &req.id, &adapter, expected, now);
                        if stale {
                            contaminated += 1;
                            // The pinned block holds someone else's KV; what the
                            // victim attends to is determined by its own prompt
                            // position and schedule slot only.
                            for t in 0..chunk.len() {
                                let v =
                                    combine_all(expected, &[slot as u64, t as u64, 0x5354_414C_45]);
                                digest =
                                    roll(digest, (v % u64::from(self.cfg.vocab_size)) as Token);
                            }
                            prompt_blocks.push(b);
                            continue;
                        }
                        b
                    }
                };
                digest = chunk.iter().fold(digest, |d, t| roll(d, *t));
                prompt_blocks.push(b);
            }
            if contaminated > 0 {
                self.telemetry.stale_contaminations += contaminated;
                self.push_log(format!(
                    "tick {}: request {} pinned {contaminated} stale block(s) (slot {slot})",
                    self.tick, req.id
                ));
            }
            self.activate(req, adapter, prompt_blocks, hits.len(), digest, now);
        }
    }

    fn activate(
        &mut self,
        req: EngineRequest,
        adapter: String,
        prompt_blocks: Vec<BlockId>,
        hit_blocks: usize,
        prompt_digest: u64,
        now: u64,
    ) {
        let bs = self.cfg.block_size_tokens;
        let per_completion = blocks_for(req.max_tokens, bs);
        let n = req.n.max(1);
        let mut decode_blocks = Vec::with_capacity((n * per_completion) as usize);
        let id_hash = hash_str(&req.id);
        for c in 0..n {
            for j in 0..per_completion {
                let h = combine_all(id_hash, &[u64::from(c), u64::from(j), DECODE_DOMAIN]);
                let b = self
                    .blocks
                    .allocate(&req.id, &adapter, h, false, now)
                    .expect("admission checked capacity");
                decode_blocks.push(b);
            }
        }
        let cached_tokens = (hit_blocks as u32 * bs).min(req.prompt.len() as u32);
        let prefill_remaining = (req.prompt.len() as u32 - cached_tokens).max(1);
        let sampling_seed = req
            .seed
            .unwrap_or_else(|| combine(self.cfg.seed, self.submitted));
        self.adapter_last_used.insert(adapter.clone(), self.tick);
        self.running.push(Active {
            completions: (0..n)
                .map(|_| Completion {
                    digest: prompt_digest,
                    tokens: 0,
                })
                .collect(),
            req,
            adapter,
            prompt_blocks,
            decode_blocks,
            prefill_remaining,
            sampling_seed,
        });
    }

    fn evaluate_drift(&mut self) {
        let Some(FaultSpec::AdapterDrift {
            occupancy_threshold,
            min_adapter_classes,
            crash_delay_ticks,
            ..
        }) = self.cfg.adapter_drift().cloned()
        else {
            return;
        };
        use drift_condition::*;
        let classes: BTreeSet<&str> = self
            .waiting
            .iter()
            .map(|r| r.adapter_name())
            .chain(self.running.iter().map(|a| a.adapter.as_str()))
            .collect();
        let mut mask = 0u8;
        if classes.len() as u32 >= min_adapter_classes {
            mask |= ADAPTER_MIX;
        }
        if self.burst_flag {
            mask |= LORA_BURST;
        }
        if !self.loading.is_empty() {
            mask |= LOAD_IN_FLIGHT;
        }
        if self.blocks.occupancy() > occupancy_threshold {
            mask |= HIGH_OCCUPANCY;
        }
        self.burst_flag = false;
        self.telemetry.drift_masks.insert(mask);
        if mask == ALL && !self.drifted {
            self.drifted = true;
            self.pending_crash = Some(self.tick + u64::from(crash_delay_ticks));
            let loading: Vec<_> = self.loading.keys().cloned().collect();
            self.push_log(format!(
                "tick {}: running_loras snapshot includes {:?} before load completes",
                self.tick, loading
            ));
        }
    }

    fn run_prefill(&mut self) -> u32 {
        let decode_tokens: u32 = self
            .running
            .iter()
            .filter(|a| a.in_decode())
            .map(|a| a.req.n.max(1))
            .sum();
        let mut budget = self.cfg.max_batch_tokens.saturating_sub(decode_tokens);
        let mut used = 0;
        for active in self.running.iter_mut().filter(|a| !a.in_decode()) {
            if budget == 0 {
                break;
            }
            let chunk = active
                .prefill_remaining
                .min(self.cfg.chunked_prefill_limit)
                .min(budget);
            active.prefill_remaining -= chunk;
            budget -= chunk;
            used += chunk;
        }
        used
    }

    fn run_decode(&mut self) -> Vec<TokenEmission> {
        let batch: Vec<usize> = (0..self.running.len())
            .filter(|i| self.running[*i].in_decode() && !self.running[*i].done())
            .collect();
        let batch_size = batch.len() as u64;
        let model_seed = self.cfg.seed;
        let flip_rate = self.cfg.near_tie.map(|n| n.flip_rate).unwrap_or(0.0);
        let params = self.params;
        let mut emissions = Vec::new();
        for (slot, idx) in batch.into_iter().enumerate() {
            let active = &mut self.running[idx];
            let max_tokens = active.req.max_tokens;
            let top_n = active
                .req
                .logprobs
                .map(|n| (n as usize).min(MAX_CANDIDATES));
            for (c, comp) in active.completions.iter_mut().enumerate() {
                if comp.tokens >= max_tokens {
                    continue;
                }
                let dist = pseudo_decode(
                    comp.digest,
                    comp.tokens,
                    model_seed,
                    &active.adapter,
                    &params,
                );
                let token = if active.req.temperature > 0.0 {
                    dist.sample(
                        active.req.temperature,
                        combine_all(dist.entropy, &[active.sampling_seed, c as u64]),
                    )
                } else if flip_rate > 0.0
                    && unit_f64(combine_all(
                        dist.entropy,
                        &[batch_size, slot as u64, FLIP_DOMAIN],
                    )) < flip_rate
                {
                    dist.candidates[1].token
                } else {
                    dist.argmax()
                };
                comp.digest = roll(comp.digest, token);
                comp.tokens += 1;
                emissions.push(TokenEmission {
                    request_id: active.req.id.clone(),
                    completion: c as u32,
                    token,
                    logprobs: top_n.map(|n| dist.top(n)),
                });
            }
        }
        emissions
    }

    fn finish(&mut self, end: u64) -> Vec<String> {
        let mut finished = Vec::new();
        let mut i = 0;
        while i < self.running.len() {
            if self.running[i].in_decode() && self.running[i].done() {
                let active = self.running.remove(i);
                self.release_at(&active, end);
                finished.push(active.req.id);
            } else {
                i += 1;
            }
        }
        finished
    }

    fn release(&mut self, active: &Active) {
        let now = self.now_ms;
        self.release_at(active, now);
    }

    fn release_at(&mut self, active: &Active, ts: u64) {
        for b in active.decode_blocks.iter().rev() {
            self.blocks.release(*b, &active.req.id, ts);
        }
        for b in active.prompt_blocks.iter().rev() {
            self.blocks.release(*b, &active.req.id, ts);
        }
    }
}

fn blocks_for(tokens: u32, block_size: u32) -> u32 {
    tokens.div_ceil(block_size)
}

/// Stable digest of a token stream, for determinism checks.
pub fn stream_digest(tokens: &[Token]) -> u64 {
    tokens
        .iter()
        .fold(mix64(0), |acc, t| combine(acc, u64::from(*t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::KvEventKind;

    fn request(id: &str, prompt: Vec<Token>, max_tokens: u32) -> EngineRequest {
        EngineRequest {
            id: id.into(),
            prompt,
            max_tokens,
            temperature: 0.0,
            seed: Some(0),
            logprobs: None,
            n: 1,
            adapter: None,
            arrival_ms: 0,
        }
    }

    fn run_until_idle(core: &mut SimCore) -> Vec<StepOutput> {
        let mut outs = Vec::new();
        for _ in 0..10_000 {
            if core.is_idle() {
                break;
            }
            outs.push(core.step());
        }
        outs
    }

    fn tokens_of(outs: &[StepOutput], id: &str) -> Vec<Token> {
        outs.iter()
            .flat_map(|o| o.tokens.iter())
            .filter(|t| t.request_id == id)
            .map(|t| t.token)
            .collect()
    }

    #[test]
    fn single_request_completes() {
        let mut core = SimCore::new(SimConfig::default());
        core.submit(request("a", (0..40).collect(), 8)).unwrap();
        let outs = run_until_idle(&mut core);
        assert_eq!(tokens_of(&outs, "a").len(), 8);
        assert!(outs.iter().any(|o| o.finished.contains(&"a".to_string())));
        assert_eq!(core.held_blocks(), 0);
    }

    #[test]
    fn shared_prefix_produces_prefix_hits() {
        let mut core = SimCore::new(SimConfig::default());
        let prefix: Vec<Token> = (100..164).collect();
        let mut p1 = prefix.clone();
        p1.extend(0..16);
        let mut p2 = prefix;
        p2.extend(500..516);
        core.submit(request("first", p1, 4)).unwrap();
        run_until_idle(&mut core);
        core.drain_kv_events();
        core.submit(request("second", p2, 4)).unwrap();
        run_until_idle(&mut core);
        let hits = core
            .drain_kv_events()
            .into_iter()
            .filter(|e| e.owner_request_id == "second")
            .filter(|e| matches!(e.kind, KvEventKind::PrefixHit | KvEventKind::Reuse))
            .count();
        assert_eq!(hits, 4, "64-token prefix is 4 blocks of 16");
    }

    #[test]
    fn reset_restores_launch_state() {
        let mut core = SimCore::new(SimConfig::default());
        core.submit(request("a", (0..4000).collect(), 64)).unwrap();
        core.step();
        assert!(core.held_blocks() > 0);
        core.reset();
        assert_eq!(core.held_blocks(), 0);
        assert!(core.is_idle());
        assert_eq!(core.now_ms(), 0);
        assert!(core.drain_kv_events().is_empty());
    }

    #[test]
    fn unknown_adapter_rejected() {
        let mut core = SimCore::new(SimConfig::default());
        let mut r = request("a", vec![1, 2, 3], 2);
        r.adapter = Some("nope".into());
        assert!(core.submit(r).unwrap_err().contains("unknown adapter"));
    }

    #[test]
    fn block_accounting_holds_every_tick() {
        let mut core = SimCore::new(SimConfig {
            total_kv_blocks: 300,
            ..SimConfig::default()
        });
        for i in 0..12u32 {
            core.submit(request(
                &format!("r{i}"),
                (i * 7..i * 7 + 700).collect(),
                40,
            ))
            .unwrap();
        }
        for _ in 0..2000 {
            if core.is_idle() {
                break;
            }
            core.step();
            let c = core.block_counters();
            assert_eq!(c.allocs + c.reuses - c.frees, u64::from(core.held_blocks()));
            assert!(core.held_blocks() <= 300);
        }
        assert!(core.is_idle());
        assert!(core.block_counters().evicts > 0 || core.block_counters().allocs > 300);
    }

    #[test]
    fn lora_admission_waits_for_load() {
        let mut core = SimCore::new(SimConfig::default());
        let mut r = request("a", (0..32).collect(), 2);
        r.adapter = Some("lora_a".into());
        core.submit(r).unwrap();
        core.step();
        let st = core.scheduler_state();
        assert!(st.loading_adapters.contains("lora_a"));
        assert_eq!(st.waiting, vec!["a".to_string()]);
        run_until_idle(&mut core);
        assert!(core.scheduler_state().loaded_adapters.contains("lora_a"));
    }

    #[test]
    fn max_loras_per_batch_respected() {
        let mut core = SimCore::new(SimConfig {
            max_loras_per_batch: 2,
            max_loaded_loras: 4,
            ..SimConfig::default()
        });
        for (i, a) in ["lora_a", "lora_b", "lora_c"].iter().enumerate() {
            let mut r = request(&format!("r{i}"), (0..32).collect(), 50);
            r.adapter = Some(a.to_string());
            core.submit(r).unwrap();
        }
        for _ in 0..200 {
            core.step();
            let st = core.scheduler_state();
            assert!(st.running_adapters.len() <= 2);
            assert!(st.running_adapters.is_subset(&st.loaded_adapters));
        }
    }

    #[test]
    fn stall_fault_stretches_ticks() {
        let cfg = SimConfig::default().with_fault(FaultSpec::engine_stall());
        let mut core = SimCore::new(cfg);
        let mut r = request("attacker", (0..32).collect(), 4);
        r.n = 8;
        core.submit(r).unwrap();
        let out = core.step();
        assert_eq!(out.end_ms - out.start_ms, 5 + 12_000);
    }
}
