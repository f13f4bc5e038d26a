//! The greybox loop: select, mutate, execute, check, confirm, retain.

mod corpus;
mod minimize;
mod pressure;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{
    markers, Corpus, CorpusEntry, EntryTelemetry, Lineage, SelectionWeights, FEEDBACK_WINDOW_MS,
};
pub use minimize::{minimize, MinimizeError, Minimized};
pub use pressure::{pressure_of, score_pressure, PressureScore};

use crate::confirm::{
    confirm_suspicion, ConfirmConfig, ConfirmContext, ConfirmationResult, Dismissal, Finding,
};
use crate::exec::{Engine, EngineEndpoint, ExecError, ExecOptions, HttpEngine, SimEngine};
use crate::mutation::{
    collapse, directed_splice, generate_seed, mutate_events, mutate_timing, splice, CutPolicy,
    MutationClass, MutationWeights, Palette, SeedProfile, DEFAULT_SPLICE_GAP_MS,
};
use crate::oracle::{evaluate, BaselineStats, OutputLedger, Suspicion, SuspicionKind, Thresholds};
use crate::report::ExecutionReport;
use crate::sim::SimConfig;
use crate::trace::{self, TimedTrace};

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid campaign config: {0}")]
    Config(String),
    #[error("endpoint failure: {0}")]
    Endpoint(#[from] ExecError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub seed: u64,
    pub iterations: u64,
    /// Wall-clock budget in seconds; unlimited when absent.
    pub time_budget_s: Option<f64>,
    /// Seed of the prompt-content synthesizer.
    pub corpus_seed: u64,
    pub corpus_cap: usize,
    /// Preset name; `seed_profile` overrides it when set.
    pub profile: String,
    pub seed_profile: Option<SeedProfile>,
    /// Iterations that run fresh seeds before mutation starts.
    pub bootstrap_seeds: u64,
    pub mutation: MutationWeights,
    pub jitter_intensity: f64,
    pub splice_gap_ms: u64,
    pub thresholds: Thresholds,
    pub confirmation: ConfirmConfig,
    pub selection: SelectionWeights,
    pub baseline_window: usize,
    pub exec: ExecOptions,
    pub sim: SimConfig,
    /// Remote engine; the in-process simulator is used when absent.
    pub endpoint: Option<EngineEndpoint>,
    /// Minimize the trace of every new crash finding.
    pub minimize: bool,
    /// Stop once this many distinct findings exist.
    pub stop_after_findings: Option<usize>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 500,
            time_budget_s: None,
            corpus_seed: 0,
            corpus_cap: 256,
            profile: "mixed".into(),
            seed_profile: None,
            bootstrap_seeds: 8,
            mutation: MutationWeights::default(),
            jitter_intensity: 0.2,
            splice_gap_ms: DEFAULT_SPLICE_GAP_MS,
            thresholds: Thresholds::default(),
            confirmation: ConfirmConfig::default(),
            selection: SelectionWeights::default(),
            baseline_window: 1024,
            exec: ExecOptions::default(),
            sim: SimConfig::default(),
            endpoint: None,
            minimize: false,
            stop_after_findings: None,
        }
    }
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self, CampaignError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CampaignError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }

    pub fn seed_profile(&self) -> Result<SeedProfile, CampaignError> {
        match &self.seed_profile {
            Some(p) => Ok(p.clone()),
            None => SeedProfile::by_name(&self.profile).ok_or_else(|| {
                CampaignError::Config(format!("unknown seed profile '{}'", self.profile))
            }),
        }
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        let bad = |m: &str| Err(CampaignError::Config(m.to_string()));
        if !self.mutation.is_valid() {
            return bad("mutation weights must be non-negative and sum to 1");
        }
        if self.time_budget_s.is_some_and(|t| !(t > 0.0)) {
            return bad("time budget must be positive");
        }
        if self.corpus_cap == 0 {
            return bad("corpus_cap must be positive");
        }
        if self.confirmation.k == 0 || !(self.confirmation.epsilon >= 0.0) {
            return bad("confirmation needs k >= 1 and epsilon >= 0");
        }
        if !self.seed_profile()?.is_valid() {
            return bad("seed profile has an empty or invalid palette");
        }
        if self.endpoint.is_none() {
            self.sim
                .validate()
                .map_err(|e| CampaignError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Execution options with the synthesizer bound to this campaign.
    pub fn exec_options(&self) -> ExecOptions {
        let mut opts = self.exec;
        opts.synth.corpus_seed = self.corpus_seed;
        if self.endpoint.is_none() {
            opts.synth.vocab_size = self.sim.vocab_size;
        }
        opts
    }

    pub fn thresholds(&self) -> Thresholds {
        let mut t = self.thresholds;
        if self.endpoint.is_none() && t.vocab_size.is_none() {
            t.vocab_size = Some(self.sim.vocab_size);
        }
        t
    }

    pub fn build_engine(&self) -> Result<Box<dyn Engine>, CampaignError> {
        Ok(match &self.endpoint {
            Some(ep) => Box::new(HttpEngine::new(ep.clone())?),
            None => Box::new(SimEngine::new(self.sim.clone())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingRecord {
    pub finding: Finding,
    pub iteration: u64,
    pub trace: TimedTrace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimized: Option<Minimized>,
}

/// Equality on fingerprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dedup {
    New,
    DuplicateOf(usize),
}

pub fn dedup(finding: &Finding, prior: &[FindingRecord]) -> Dedup {
    match prior
        .iter()
        .position(|r| r.finding.fingerprint == finding.fingerprint)
    {
        Some(i) => Dedup::DuplicateOf(i),
        None => Dedup::New,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressurePoint {
    pub iteration: u64,
    pub trace_id: String,
    pub score: PressureScore,
    pub best_so_far: f64,
}

/// What happened in one iteration, for progress reporting.
#[derive(Debug, Clone)]
pub struct IterationRecord<'a> {
    pub iteration: u64,
    pub trace_id: &'a str,
    pub mutation: &'a str,
    pub suspicions: &'a [Suspicion],
    pub new_findings: usize,
    pub corpus_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub iterations_run: u64,
    pub executed: Vec<String>,
    pub findings: Vec<FindingRecord>,
    pub suspicions: usize,
    pub suspicions_by_kind: BTreeMap<String, usize>,
    pub dismissals: Vec<Dismissal>,
    pub unconfirmable: usize,
    pub pressure: Vec<PressurePoint>,
    pub corpus_size: usize,
    pub baseline_p50_ms: Option<f64>,
    pub elapsed_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

impl CampaignSummary {
    pub fn fingerprints(&self) -> Vec<String> {
        self.findings
            .iter()
            .map(|f| f.finding.fingerprint.clone())
            .collect()
    }

    pub fn findings_of(&self, kind: SuspicionKind) -> impl Iterator<Item = &FindingRecord> {
        self.findings.iter().filter(move |f| f.finding.kind == kind)
    }
}

pub struct Campaign {
    cfg: CampaignConfig,
    profile: SeedProfile,
    palette: Palette,
    opts: ExecOptions,
    thresholds: Thresholds,
    rng: ChaCha8Rng,
    engine: Box<dyn Engine>,
    /// Separate instance so replays never touch the execution engine.
    confirmer: Box<dyn Engine>,
    corpus: Corpus,
    baseline: BaselineStats,
    ledger: OutputLedger,
    summary: CampaignSummary,
    best_pressure: f64,
}

/// Consecutive failed iterations after which the endpoint is given up on.
const MAX_ENDPOINT_FAILURES: u32 = 3;

impl Campaign {
    pub fn new(cfg: CampaignConfig) -> Result<Self, CampaignError> {
        cfg.validate()?;
        let engine = cfg.build_engine()?;
        let confirmer = cfg.build_engine()?;
        Self::with_engines(cfg, engine, confirmer)
    }

    pub fn with_engines(
        cfg: CampaignConfig,
        engine: Box<dyn Engine>,
        confirmer: Box<dyn Engine>,
    ) -> Result<Self, CampaignError> {
        cfg.validate()?;
        let profile = cfg.seed_profile()?;
        Ok(Self {
            palette: Palette::from_profile(&profile),
            profile,
            opts: cfg.exec_options(),
            thresholds: cfg.thresholds(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            baseline: BaselineStats::with_capacity(cfg.baseline_window),
            engine,
            confirmer,
            corpus: Corpus::default(),
            ledger: OutputLedger::default(),
            summary: CampaignSummary::default(),
            best_pressure: 0.0,
            cfg,
        })
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.cfg
    }

    fn next_trace(&mut self, iteration: u64) -> TimedTrace {
        let seed: u64 = self.rng.gen();
        if iteration < self.cfg.bootstrap_seeds || self.corpus.is_empty() {
            return generate_seed(&self.profile, seed);
        }
        let w = self.cfg.selection;
        let parent = self
            .corpus
            .select(&mut self.rng, iteration, &w)
            .expect("non-empty corpus");
        let parent_trace = &self.corpus.entries[parent].trace;
        match self.cfg.mutation.pick(&mut self.rng) {
            MutationClass::Timing => {
                if self.rng.gen_bool(0.5) {
                    mutate_timing(parent_trace, seed, self.cfg.jitter_intensity)
                } else {
                    collapse(parent_trace, seed)
                }
            }
            MutationClass::Event => mutate_events(parent_trace, seed, &self.palette).0,
            MutationClass::Splice => {
                let other = self
                    .corpus
                    .select(&mut self.rng, iteration, &w)
                    .expect("non-empty corpus");
                splice(
                    parent_trace,
                    &self.corpus.entries[other].trace,
                    CutPolicy::Random,
                    seed,
                )
            }
            MutationClass::DirectedSplice => {
                let other = self
                    .corpus
                    .select(&mut self.rng, iteration, &w)
                    .expect("non-empty corpus");
                let (a, b) = (&self.corpus.entries[parent], &self.corpus.entries[other]);
                directed_splice(
                    &a.trace,
                    &b.trace,
                    Some(&a.feedback),
                    Some(&b.feedback),
                    self.cfg.splice_gap_ms,
                    seed,
                )
            }
        }
    }

    /// Runs the loop until a budget is spent. `observe` sees every iteration.
    pub fn run(&mut self, observe: impl FnMut(&IterationRecord)) -> CampaignSummary {
        self.run_until(observe, |_| false)
    }

    /// Like [`Campaign::run`], and also stops once `done` accepts the
    /// findings so far.
    pub fn run_until(
        &mut self,
        mut observe: impl FnMut(&IterationRecord),
        mut done: impl FnMut(&[FindingRecord]) -> bool,
    ) -> CampaignSummary {
        let started = Instant::now();
        let deadline = self
            .cfg
            .time_budget_s
            .map(|s| started + Duration::from_secs_f64(s));
        let mut failures = 0u32;
        let mut iteration = 0u64;
        while iteration < self.cfg.iterations {
            if deadline.is_some_and(|d| Instant::now() >= d) {
                break;
            }
            if self
                .cfg
                .stop_after_findings
                .is_some_and(|n| self.summary.findings.len() >= n)
                || done(&self.summary.findings)
            {
                break;
            }
            let mut child = self.next_trace(iteration);
            child.trace_id = format!("it{iteration:05}");
            let child = trace::repair(&child);

            let report = match self.execute(&child) {
                Ok(r) => {
                    failures = 0;
                    r
                }
                Err(e) => {
                    failures += 1;
                    if failures >= MAX_ENDPOINT_FAILURES {
                        self.summary.aborted = Some(e.to_string());
                        break;
                    }
                    iteration += 1;
                    continue;
                }
            };
            self.absorb(iteration, child, report, &mut observe);
            iteration += 1;
        }
        self.summary.iterations_run = iteration;
        self.summary.corpus_size = self.corpus.len();
        self.summary.baseline_p50_ms = self.baseline.p50();
        self.summary.elapsed_s = started.elapsed().as_secs_f64();
        self.summary.clone()
    }

    fn execute(&mut self, trace: &TimedTrace) -> Result<ExecutionReport, ExecError> {
        // Each execution starts from launch state; a crashed engine is
        // restarted here as well.
        if self.engine.reset().is_err() && !self.engine.healthy() {
            return Err(ExecError::Unreachable(
                "engine did not come back after reset".into(),
            ));
        }
        self.engine.execute(trace, &self.opts)
    }

    fn absorb(
        &mut self,
        iteration: u64,
        trace: TimedTrace,
        report: ExecutionReport,
        observe: &mut impl FnMut(&IterationRecord),
    ) -> usize {
        self.summary.executed.push(trace.trace_id.clone());
        let eval = evaluate(
            &trace,
            &report,
            &self.baseline,
            &self.thresholds,
            Some(&self.ledger),
        );
        let suspicions = eval.suspicions;
        let novelty = self.corpus.novelty(&report);

        let score = pressure_of(&trace, &report);
        self.best_pressure = self.best_pressure.max(score.s_total);
        self.summary.pressure.push(PressurePoint {
            iteration,
            trace_id: trace.trace_id.clone(),
            score,
            best_so_far: self.best_pressure,
        });

        let mut new_findings = 0;
        for s in &suspicions {
            self.summary.suspicions += 1;
            *self
                .summary
                .suspicions_by_kind
                .entry(s.kind.to_string())
                .or_default() += 1;
            if let Some(i) = self
                .summary
                .findings
                .iter()
                .position(|r| r.finding.fingerprint == s.fingerprint)
            {
                self.summary.findings[i].finding.duplicates += 1;
                continue;
            }
            let ctx = ConfirmContext {
                config: self.cfg.confirmation,
                thresholds: self.thresholds,
                exec: self.opts,
                campaign_p50_ms: self.baseline.p50(),
            };
            match confirm_suspicion(self.confirmer.as_mut(), &trace, &report, s, &ctx) {
                ConfirmationResult::Finding(f) => match dedup(&f, &self.summary.findings) {
                    Dedup::DuplicateOf(i) => self.summary.findings[i].finding.duplicates += 1,
                    Dedup::New => {
                        let minimized = (self.cfg.minimize && f.kind == SuspicionKind::Crash)
                            .then(|| self.minimize_crash(&trace, &f.fingerprint).ok())
                            .flatten();
                        self.summary.findings.push(FindingRecord {
                            finding: f,
                            iteration,
                            trace: trace.clone(),
                            minimized,
                        });
                        new_findings += 1;
                    }
                },
                ConfirmationResult::Dismissed(d) => self.summary.dismissals.push(d),
                ConfirmationResult::Unconfirmable { .. } => self.summary.unconfirmable += 1,
            }
        }

        if suspicions.is_empty() {
            self.baseline.absorb(&report);
            self.ledger.record(&trace, &report);
        }
        if !novelty.is_empty() || !suspicions.is_empty() {
            let entry =
                CorpusEntry::new(trace.clone(), report, novelty, suspicions.len(), iteration);
            let w = self.cfg.selection;
            self.corpus
                .insert(entry, self.cfg.corpus_cap, iteration, &w);
        }
        observe(&IterationRecord {
            iteration,
            trace_id: &trace.trace_id,
            mutation: trace
                .metadata
                .get(crate::mutation::MUTATION_KEY)
                .map(String::as_str)
                .unwrap_or("seed"),
            suspicions: &suspicions,
            new_findings,
            corpus_size: self.corpus.len(),
        });
        new_findings
    }

    /// Shrinks a crashing trace while the crash keeps its fingerprint.
    pub fn minimize_crash(
        &mut self,
        trace: &TimedTrace,
        fingerprint: &str,
    ) -> Result<Minimized, MinimizeError> {
        let opts = self.opts;
        let thresholds = self.thresholds;
        let engine = self.confirmer.as_mut();
        minimize(
            trace,
            |t| crash_reproduces(engine, t, &opts, &thresholds, fingerprint),
            self.cfg.confirmation.k,
        )
    }
}

/// One replay from launch state; true when it crashes with `fingerprint`.
pub fn crash_reproduces(
    engine: &mut dyn Engine,
    trace: &TimedTrace,
    opts: &ExecOptions,
    thresholds: &Thresholds,
    fingerprint: &str,
) -> bool {
    if engine.reset().is_err() {
        return false;
    }
    match engine.execute(trace, opts) {
        Ok(r) => {
            r.server_crashed
                && crate::oracle::behavioral_check(trace, &r, &BaselineStats::default(), thresholds)
                    .suspicions
                    .iter()
                    .any(|s| s.fingerprint == fingerprint)
        }
        Err(_) => false,
    }
}

/// Runs a campaign end to end.
pub fn run_campaign(cfg: CampaignConfig) -> Result<CampaignSummary, CampaignError> {
    Ok(Campaign::new(cfg)?.run(|_| {}))
}

// ---------------------------------------------------------------------------
// Output directory

/// Writes the campaign directory:
///
/// ```text
/// config.toml            effective configuration
/// summary.json           counters, findings, dismissals
/// pressure.csv           per-iteration pressure score and running best
/// findings/<fp>.json     one record per distinct finding
/// findings/<fp>.trace.json            trace that exposed it
/// findings/<fp>.minimized.trace.json  when minimized
/// corpus/<trace_id>.trace.json        retained traces
/// ```
pub fn write_outputs(
    dir: &Path,
    cfg: &CampaignConfig,
    summary: &CampaignSummary,
    corpus: &Corpus,
) -> std::io::Result<()> {
    fs::create_dir_all(dir.join("findings"))?;
    fs::create_dir_all(dir.join("corpus"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_vec_pretty(summary)?,
    )?;

    let mut csv = fs::File::create(dir.join("pressure.csv"))?;
    writeln!(
        csv,
        "iteration,trace_id,n_send,n_adapter,n_kv,n_shape,s_total,best_so_far"
    )?;
    for p in &summary.pressure {
        let s = &p.score;
        writeln!(
            csv,
            "{},{},{},{},{},{},{:.6},{:.6}",
            p.iteration,
            p.trace_id,
            s.n_send,
            s.n_adapter,
            s.n_kv,
            s.n_shape,
            s.s_total,
            p.best_so_far
        )?;
    }

    for rec in &summary.findings {
        let fp = &rec.finding.fingerprint;
        fs::write(
            dir.join("findings").join(format!("{fp}.json")),
            serde_json::to_vec_pretty(rec)?,
        )?;
        write_trace(
            &dir.join("findings").join(format!("{fp}.trace.json")),
            &rec.trace,
        )?;
        if let Some(m) = &rec.minimized {
            write_trace(
                &dir.join("findings")
                    .join(format!("{fp}.minimized.trace.json")),
                &m.trace,
            )?;
        }
    }
    for e in &corpus.entries {
        write_trace(
            &dir.join("corpus")
                .join(format!("{}.trace.json", e.trace.trace_id)),
            &e.trace,
        )?;
    }
    Ok(())
}

pub fn write_trace(path: &Path, t: &TimedTrace) -> std::io::Result<()> {
    let bytes = trace::serialize(t).map_err(|e| std::io::Error::other(e.to_string()))?;
    fs::write(path, bytes)
}

pub fn read_trace(path: &Path) -> std::io::Result<TimedTrace> {
    let bytes = fs::read(path)?;
    trace::deserialize(&bytes)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

/// Finding files under a campaign directory, keyed by fingerprint.
pub fn load_findings(dir: &Path) -> std::io::Result<HashMap<String, (FindingRecord, PathBuf)>> {
    let mut out = HashMap::new();
    let findings = dir.join("findings");
    if !findings.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(findings)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(".json") && !name.ends_with(".trace.json") {
            let rec: FindingRecord = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
            out.insert(rec.finding.fingerprint.clone(), (rec, path));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_budget_runs_nothing() {
        let cfg = CampaignConfig {
            iterations: 0,
            ..CampaignConfig::default()
        };
        let s = run_campaign(cfg).unwrap();
        assert_eq!(s.iterations_run, 0);
        assert!(s.findings.is_empty());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = CampaignConfig::default();
        let back = CampaignConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_weights_are_rejected() {
        let mut cfg = CampaignConfig::default();
        cfg.mutation.timing = 0.9;
        assert!(cfg.validate().is_err());
    }
}
