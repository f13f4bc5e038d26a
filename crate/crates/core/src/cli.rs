//! The `servefuzz` command line.
//!
//! Exit codes: 0 success, 1 findings (run, confirm), 2 usage or config
//! error, 3 endpoint failure or an input that does not reproduce.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::campaign::{
    minimize, read_trace, write_outputs, write_trace, Campaign, CampaignConfig, CampaignError,
    CampaignSummary, MinimizeError,
};
use crate::confirm::{confirm_suspicion, first_difference, ConfirmContext, ConfirmationResult};
use crate::exec::{Engine, EngineEndpoint, EngineKind, ExecError, ExecOptions};
use crate::oracle::{
    behavioral_check, relational_check, structural_forensics, BaselineStats, Suspicion, Thresholds,
};
use crate::report::ExecutionReport;
use crate::sim::server::SimServer;
use crate::sim::{FaultSpec, NearTie, SimConfig};
use crate::trace::TimedTrace;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FINDINGS: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ENDPOINT: i32 = 3;

/// Environment variable naming the default endpoint.
pub const ENDPOINT_ENV: &str = "SERVEFUZZ_ENDPOINT";

#[derive(Debug, Parser)]
#[command(
    name = "servefuzz",
    version,
    about = "Greybox fuzzer for LLM inference servers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Target {
    /// Run against an in-process simulator instead of a remote endpoint.
    #[arg(long)]
    pub sim: bool,
    /// Planted simulator fault: F1, F2 or F3.
    #[arg(long, requires = "sim")]
    pub fault: Option<String>,
    /// Simulator near-tie mode with this logprob gap.
    #[arg(long, requires = "sim")]
    pub near_tie: Option<f64>,
    /// Completion endpoint base URL.
    #[arg(long, env = ENDPOINT_ENV)]
    pub endpoint: Option<String>,
    /// The endpoint is a servefuzz simulator and serves the KV event stream.
    #[arg(long)]
    pub sim_endpoint: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a fuzzing campaign.
    Run {
        /// Campaign config (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        target: Target,
        /// Iteration budget.
        #[arg(long)]
        budget: Option<u64>,
        /// Wall-clock budget in seconds.
        #[arg(long)]
        time_budget: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Seed profile: mixed, prefix_sharing, lora or interference.
        #[arg(long)]
        profile: Option<String>,
        /// Minimize new crash findings.
        #[arg(long)]
        minimize: bool,
        /// Stop after this many distinct findings.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Campaign directory.
        #[arg(long, short, default_value = "servefuzz-out")]
        out: PathBuf,
    },
    /// Replay a trace k times and compare the outputs.
    Replay {
        trace: PathBuf,
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Report to compare against (JSON).
        #[arg(long)]
        original: Option<PathBuf>,
    },
    /// Execute a trace once and confirm every suspicion it raises.
    Confirm {
        trace: PathBuf,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        top_n: Option<u32>,
    },
    /// Shrink a trace while a crash or a given finding keeps reproducing.
    Minimize {
        trace: PathBuf,
        #[command(flatten)]
        target: Target,
        /// `crash`, or the fingerprint of a finding.
        #[arg(long, default_value = "crash")]
        predicate: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Output trace; defaults next to the input.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Serve the simulator over HTTP until it is killed or crashes.
    Sim {
        #[arg(long, default_value = "127.0.0.1:8000")]
        addr: String,
        /// Simulator config (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fault: Option<String>,
        #[arg(long)]
        near_tie: Option<f64>,
    },
    /// Summarize a campaign directory.
    Report {
        dir: PathBuf,
        /// Print JSON instead of tables.
        #[arg(long)]
        json: bool,
        /// Write the pressure series as CSV to this path.
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Endpoint(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Endpoint(_) => EXIT_ENDPOINT,
        }
    }
}

impl From<CampaignError> for Failure {
    fn from(e: CampaignError) -> Self {
        match e {
            CampaignError::Endpoint(e) => Failure::Endpoint(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<ExecError> for Failure {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::InvalidTrace(_) => Failure::Usage(e.to_string()),
            other => Failure::Endpoint(other.to_string()),
        }
    }
}

type Out<'a> = &'a mut dyn Write;

/// Parses `args` (program name first) and runs the command. Output goes to
/// `out`; diagnostics to `err`.
pub fn run_cli<I, T>(args: I, out: Out, err: Out) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Endpoint(m)) = &f;
            let _ = writeln!(err, "error: {m}");
            f.code()
        }
    }
}

fn dispatch(cmd: Command, out: Out, err: Out) -> Result<i32, Failure> {
    match cmd {
        Command::Run {
            config,
            target,
            budget,
            time_budget,
            seed,
            profile,
            minimize,
            stop_after,
            out: dir,
        } => {
            let mut cfg = match &config {
                Some(p) => load_config(p)?,
                None => CampaignConfig::default(),
            };
            if config.is_none() && !target.sim && target.endpoint.is_none() {
                return Err(Failure::Usage(format!(
                    "no target: pass --sim, --endpoint or set {ENDPOINT_ENV}"
                )));
            }
            apply_target(&mut cfg, &target)?;
            if let Some(b) = budget {
                cfg.iterations = b;
            }
            if time_budget.is_some() {
                cfg.time_budget_s = time_budget;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            // Without an explicit choice, seed toward the armed fault.
            let profile = profile.or_else(|| {
                config
                    .is_none()
                    .then(|| target.fault.as_deref().and_then(profile_for_fault))
                    .flatten()
                    .map(str::to_string)
            });
            if let Some(p) = profile {
                cfg.profile = p;
                cfg.seed_profile = None;
            }
            cfg.minimize |= minimize;
            if stop_after.is_some() {
                cfg.stop_after_findings = stop_after;
            }
            cmd_run(cfg, &dir, out, err)
        }
        Command::Replay {
            trace,
            target,
            k,
            original,
        } => {
            if k == 0 {
                return Err(Failure::Usage("k must be at least 1".into()));
            }
            let cfg = target_config(&target)?;
            let trace = load_trace(&trace)?;
            let original = original.map(|p| load_report(&p)).transpose()?;
            cmd_replay(&cfg, &trace, k, original.as_ref(), out)
        }
        Command::Confirm {
            trace,
            target,
            config,
            k,
            epsilon,
            top_n,
        } => {
            let mut cfg = match &config {
                Some(p) => load_config(p)?,
                None => CampaignConfig::default(),
            };
            apply_target(&mut cfg, &target)?;
            if let Some(k) = k {
                cfg.confirmation.k = k;
            }
            if let Some(e) = epsilon {
                cfg.confirmation.epsilon = e;
            }
            if let Some(n) = top_n {
                cfg.confirmation.n = n;
            }
            cfg.validate()?;
            let trace = load_trace(&trace)?;
            cmd_confirm(&cfg, &trace, out)
        }
        Command::Minimize {
            trace: path,
            target,
            predicate,
            k,
            out: dest,
        } => {
            if k == 0 {
                return Err(Failure::Usage("k must be at least 1".into()));
            }
            let cfg = target_config(&target)?;
            let trace = load_trace(&path)?;
            let dest = dest.unwrap_or_else(|| minimized_path(&path));
            cmd_minimize(&cfg, &trace, &predicate, k, &dest, out)
        }
        Command::Sim {
            addr,
            config,
            fault,
            near_tie,
        } => {
            let mut sim = match &config {
                Some(p) => {
                    let text = fs::read_to_string(p)
                        .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
                    toml::from_str::<SimConfig>(&text)
                        .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
                }
                None => SimConfig::default(),
            };
            arm(&mut sim, fault.as_deref(), near_tie)?;
            let server = SimServer::start(sim, &addr).map_err(|e| match e.kind() {
                std::io::ErrorKind::InvalidInput => Failure::Usage(e.to_string()),
                _ => Failure::Endpoint(format!("cannot bind {addr}: {e}")),
            })?;
            let _ = writeln!(out, "simulator listening on {}", server.base_url());
            let _ = out.flush();
            let _ = err.flush();
            server.wait();
            Ok(EXIT_OK)
        }
        Command::Report {
            dir,
            json,
            plot_data,
        } => cmd_report(&dir, json, plot_data.as_deref(), out),
    }
}

/// Seed profile that exercises a planted fault's trigger.
pub fn profile_for_fault(fault: &str) -> Option<&'static str> {
    match FaultSpec::from_name(fault)? {
        FaultSpec::StaleKv { .. } => Some("prefix_sharing"),
        FaultSpec::EngineStall { .. } => Some("interference"),
        FaultSpec::AdapterDrift { .. } => Some("lora"),
    }
}

fn load_config(path: &Path) -> Result<CampaignConfig, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(CampaignConfig::from_toml(&text)?)
}

fn load_trace(path: &Path) -> Result<TimedTrace, Failure> {
    let t = read_trace(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let v = t.validate();
    if !v.is_ok() {
        return Err(Failure::Usage(format!(
            "{}: invalid trace: {}",
            path.display(),
            v.violations
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    Ok(t)
}

fn load_report(path: &Path) -> Result<ExecutionReport, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn arm(sim: &mut SimConfig, fault: Option<&str>, near_tie: Option<f64>) -> Result<(), Failure> {
    if let Some(name) = fault {
        let spec = FaultSpec::from_name(name)
            .ok_or_else(|| Failure::Usage(format!("unknown fault '{name}'")))?;
        *sim = sim.clone().with_fault(spec);
    }
    if let Some(gap) = near_tie {
        sim.near_tie = Some(NearTie {
            gap,
            flip_rate: sim.near_tie.map_or(0.05, |n| n.flip_rate),
        });
    }
    Ok(())
}

/// `--sim` wins over an endpoint; an endpoint replaces the simulator.
fn apply_target(cfg: &mut CampaignConfig, target: &Target) -> Result<(), Failure> {
    if target.sim {
        cfg.endpoint = None;
        arm(&mut cfg.sim, target.fault.as_deref(), target.near_tie)?;
    } else if let Some(url) = &target.endpoint {
        let kind = if target.sim_endpoint {
            EngineKind::Simulator
        } else {
            EngineKind::GenericOpenaiCompatible
        };
        cfg.endpoint = Some(EngineEndpoint::new(url.clone(), kind));
    }
    Ok(())
}

fn target_config(target: &Target) -> Result<CampaignConfig, Failure> {
    if !target.sim && target.endpoint.is_none() {
        return Err(Failure::Usage(format!(
            "no target: pass --sim, --endpoint or set {ENDPOINT_ENV}"
        )));
    }
    let mut cfg = CampaignConfig::default();
    apply_target(&mut cfg, target)?;
    cfg.validate()?;
    Ok(cfg)
}

fn minimized_path(input: &Path) -> PathBuf {
    let name = input
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("trace.json");
    let stem = name
        .strip_suffix(".trace.json")
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(name);
    input.with_file_name(format!("{stem}.minimized.trace.json"))
}

// ---------------------------------------------------------------------------

fn cmd_run(cfg: CampaignConfig, dir: &Path, out: Out, err: Out) -> Result<i32, Failure> {
    let mut campaign = Campaign::new(cfg)?;
    let summary = campaign.run(|r| {
        if r.new_findings > 0 {
            let _ = writeln!(
                err,
                "iteration {}: {} new finding(s), corpus {}",
                r.iteration, r.new_findings, r.corpus_size
            );
        }
    });
    write_outputs(dir, campaign.config(), &summary, campaign.corpus())
        .map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    let _ = writeln!(
        out,
        "{} iteration(s), {} suspicion(s), {} dismissed, {} finding(s) -> {}",
        summary.iterations_run,
        summary.suspicions,
        summary.dismissals.len(),
        summary.findings.len(),
        dir.display()
    );
    for f in &summary.findings {
        let _ = writeln!(
            out,
            "  {:<20} {}",
            f.finding.kind.as_str(),
            f.finding.fingerprint
        );
    }
    if let Some(why) = &summary.aborted {
        return Err(Failure::Endpoint(format!(
            "campaign aborted ({why}); partial results kept"
        )));
    }
    Ok(if summary.findings.is_empty() {
        EXIT_OK
    } else {
        EXIT_FINDINGS
    })
}

/// Hash of every outcome's status and tokens, in trace order.
pub fn outcome_digest(report: &ExecutionReport) -> String {
    let mut h = Sha256::new();
    for o in &report.outcomes {
        h.update(o.request_id.as_bytes());
        h.update([0]);
        h.update(o.status.as_str().as_bytes());
        for c in &o.output_tokens {
            h.update([1]);
            for t in c {
                h.update(t.to_le_bytes());
            }
        }
        h.update([2]);
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn anomalies(
    trace: &TimedTrace,
    report: &ExecutionReport,
    thresholds: &Thresholds,
) -> Vec<Suspicion> {
    let mut found =
        behavioral_check(trace, report, &BaselineStats::default(), thresholds).suspicions;
    found.extend(structural_forensics(report));
    found.extend(relational_check(trace, report));
    found
}

fn cmd_replay(
    cfg: &CampaignConfig,
    trace: &TimedTrace,
    k: usize,
    original: Option<&ExecutionReport>,
    out: Out,
) -> Result<i32, Failure> {
    let mut engine = cfg.build_engine()?;
    let opts = cfg.exec_options();
    let thresholds = cfg.thresholds();
    let mut digests = Vec::with_capacity(k);
    let mut seen: BTreeMap<String, (String, usize)> = BTreeMap::new();
    let mut diffs: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
    for i in 0..k {
        engine.reset()?;
        let r = engine.execute(trace, &opts)?;
        let d = outcome_digest(&r);
        let _ = writeln!(
            out,
            "replay {}/{k}: digest {d}, {} request(s){}",
            i + 1,
            r.outcomes.len(),
            if r.server_crashed {
                ", server crashed"
            } else {
                ""
            }
        );
        digests.push(d);
        for s in anomalies(trace, &r, &thresholds) {
            seen.entry(s.fingerprint.clone())
                .or_insert_with(|| (describe(&s), 0))
                .1 += 1;
        }
        if let Some(orig) = original {
            for o in &r.outcomes {
                let Some(base) = orig.outcome(&o.request_id) else {
                    continue;
                };
                if let Some(p) = first_difference(base.primary_tokens(), o.primary_tokens()) {
                    *diffs
                        .entry(o.request_id.clone())
                        .or_default()
                        .entry(p)
                        .or_default() += 1;
                }
            }
        }
    }
    let reference = original
        .map(outcome_digest)
        .unwrap_or_else(|| digests[0].clone());
    let same = digests.iter().filter(|d| **d == reference).count();
    let against = if original.is_some() {
        "the original"
    } else {
        "replay 1"
    };
    let _ = writeln!(out, "{same}/{k} identical to {against}");
    for (id, positions) in &diffs {
        for (p, n) in positions {
            let _ = writeln!(
                out,
                "  {id}: first difference at position {p} in {n}/{k} replay(s)"
            );
        }
    }
    for (fp, (what, n)) in &seen {
        let _ = writeln!(out, "  {what} [{fp}] reproduced in {n}/{k}");
    }
    Ok(EXIT_OK)
}

fn describe(s: &Suspicion) -> String {
    format!("{} ({})", s.kind.as_str(), s.affected_requests.join(","))
}

fn cmd_confirm(cfg: &CampaignConfig, trace: &TimedTrace, out: Out) -> Result<i32, Failure> {
    let mut engine = cfg.build_engine()?;
    let mut confirmer = cfg.build_engine()?;
    let opts = cfg.exec_options();
    let thresholds = cfg.thresholds();
    engine.reset()?;
    let report = engine.execute(trace, &opts)?;
    let suspicions = anomalies(trace, &report, &thresholds);
    let _ = writeln!(out, "{} suspicion(s)", suspicions.len());
    let ctx = ConfirmContext {
        config: cfg.confirmation,
        thresholds,
        exec: opts,
        campaign_p50_ms: None,
    };
    let mut findings = 0;
    let mut done = std::collections::BTreeSet::new();
    for s in &suspicions {
        if !done.insert(s.fingerprint.clone()) {
            continue;
        }
        match confirm_suspicion(confirmer.as_mut(), trace, &report, s, &ctx) {
            ConfirmationResult::Finding(f) => {
                findings += 1;
                let verdict = f
                    .verdict
                    .map(|v| format!(" {:?}", v.verdict))
                    .unwrap_or_default();
                let _ = writeln!(
                    out,
                    "  FINDING {} [{}] reproduced {}/{}{verdict}",
                    describe(s),
                    f.fingerprint,
                    f.reproduction_count,
                    f.replay_count
                );
                if let Some(t) = &f.timing {
                    let _ = writeln!(
                        out,
                        "    victim {} {} ms vs {} ms alone ({:.0}x), recovered: {}",
                        t.victim,
                        t.replay_ttft_ms,
                        t.replay_baseline_ttft_ms,
                        t.amplification_vs_replay,
                        t.recovered
                    );
                }
            }
            ConfirmationResult::Dismissed(d) => {
                let _ = writeln!(out, "  dismissed {}: {}", describe(s), d.reason);
            }
            ConfirmationResult::Unconfirmable { error, .. } => {
                let _ = writeln!(out, "  unconfirmable {}: {error}", describe(s));
            }
        }
    }
    Ok(if findings > 0 { EXIT_FINDINGS } else { EXIT_OK })
}

fn cmd_minimize(
    cfg: &CampaignConfig,
    trace: &TimedTrace,
    predicate: &str,
    k: usize,
    dest: &Path,
    out: Out,
) -> Result<i32, Failure> {
    let mut engine = cfg.build_engine()?;
    let opts = cfg.exec_options();
    let thresholds = cfg.thresholds();
    let fingerprint = if predicate == "crash" {
        engine.reset()?;
        let r = engine.execute(trace, &opts)?;
        match anomalies(trace, &r, &thresholds)
            .into_iter()
            .find(|s| s.kind == crate::oracle::SuspicionKind::Crash)
        {
            Some(s) => s.fingerprint,
            None => return Err(Failure::Endpoint("input does not crash the engine".into())),
        }
    } else {
        predicate.to_string()
    };
    let engine = engine.as_mut();
    let holds = |t: &TimedTrace| reproduces(engine, t, &opts, &thresholds, &fingerprint);
    let m = match minimize(trace, holds, k) {
        Ok(m) => m,
        Err(MinimizeError::Flaky { reproduced, k }) => {
            return Err(Failure::Endpoint(format!(
            "input reproduces {fingerprint} in only {reproduced} of {k} runs; nothing to minimize"
        )))
        }
    };
    write_trace(dest, &m.trace).map_err(|e| Failure::Usage(format!("{}: {e}", dest.display())))?;
    let mut log = format!(
        "{} -> {} event(s), {} predicate run(s)\n",
        m.original_events,
        m.trace.events.len(),
        m.predicate_runs
    );
    if m.rounds.is_empty() {
        log.push_str("no events removed\n");
    }
    for r in &m.rounds {
        log.push_str(r);
        log.push('\n');
    }
    let log_path = dest.with_extension("log");
    fs::write(&log_path, &log)
        .map_err(|e| Failure::Usage(format!("{}: {e}", log_path.display())))?;
    let _ = write!(out, "{log}");
    let _ = writeln!(out, "wrote {}", dest.display());
    Ok(EXIT_OK)
}

/// One run from launch state shows `fingerprint` again.
fn reproduces(
    engine: &mut dyn Engine,
    trace: &TimedTrace,
    opts: &ExecOptions,
    thresholds: &Thresholds,
    fingerprint: &str,
) -> bool {
    if engine.reset().is_err() {
        return false;
    }
    engine.execute(trace, opts).is_ok_and(|r| {
        anomalies(trace, &r, thresholds)
            .iter()
            .any(|s| s.fingerprint == fingerprint)
    })
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FindingRow {
    pub kind: String,
    pub fingerprint: String,
    pub iteration: u64,
    pub reproduced: usize,
    pub replays: usize,
    pub duplicates: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplification: Option<f64>,
    pub minimized_events: Option<usize>,
}

/// One point per iteration: the four weighted components, their sum and the
/// running maximum. `finding` marks iterations that produced a new finding.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub iteration: u64,
    pub burst: f64,
    pub multi_adapter: f64,
    pub kv_pressure: f64,
    pub shape_diversity: f64,
    pub s_total: f64,
    pub running_max: f64,
    pub finding: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignReport {
    pub iterations: u64,
    pub suspicions: usize,
    pub dismissed: usize,
    pub unconfirmable: usize,
    pub findings: Vec<FindingRow>,
    pub series: Vec<SeriesPoint>,
}

/// Builds the report from a campaign's `summary.json`.
pub fn build_report(summary: &CampaignSummary) -> CampaignReport {
    let finding_iters: std::collections::BTreeSet<u64> =
        summary.findings.iter().map(|f| f.iteration).collect();
    let mut running_max = 0.0f64;
    let series = summary
        .pressure
        .iter()
        .map(|p| {
            let s = &p.score;
            let total = s.burst + s.multi_adapter + s.kv_pressure + s.shape_diversity;
            running_max = running_max.max(total);
            SeriesPoint {
                iteration: p.iteration,
                burst: s.burst,
                multi_adapter: s.multi_adapter,
                kv_pressure: s.kv_pressure,
                shape_diversity: s.shape_diversity,
                s_total: total,
                running_max,
                finding: finding_iters.contains(&p.iteration),
            }
        })
        .collect();
    CampaignReport {
        iterations: summary.iterations_run,
        suspicions: summary.suspicions,
        dismissed: summary.dismissals.len(),
        unconfirmable: summary.unconfirmable,
        findings: summary
            .findings
            .iter()
            .map(|f| FindingRow {
                kind: f.finding.kind.as_str().to_string(),
                fingerprint: f.finding.fingerprint.clone(),
                iteration: f.iteration,
                reproduced: f.finding.reproduction_count,
                replays: f.finding.replay_count,
                duplicates: f.finding.duplicates,
                amplification: f
                    .finding
                    .timing
                    .as_ref()
                    .and_then(|t| t.amplification_vs_campaign),
                minimized_events: f.minimized.as_ref().map(|m| m.trace.events.len()),
            })
            .collect(),
        series,
    }
}

pub fn series_csv(series: &[SeriesPoint]) -> String {
    let mut s = String::from(
        "iteration,burst,multi_adapter,kv_pressure,shape_diversity,s_total,running_max,finding\n",
    );
    for p in series {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            p.iteration,
            p.burst,
            p.multi_adapter,
            p.kv_pressure,
            p.shape_diversity,
            p.s_total,
            p.running_max,
            u8::from(p.finding)
        ));
    }
    s
}

fn cmd_report(dir: &Path, json: bool, plot_data: Option<&Path>, out: Out) -> Result<i32, Failure> {
    let path = dir.join("summary.json");
    let bytes = fs::read(&path)
        .map_err(|_| Failure::Usage(format!("{}: not a campaign directory", dir.display())))?;
    let summary: CampaignSummary = serde_json::from_slice(&bytes)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let report = build_report(&summary);
    if let Some(p) = plot_data {
        fs::write(p, series_csv(&report.series))
            .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
    }
    if json {
        let _ = writeln!(
            out,
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
        return Ok(EXIT_OK);
    }
    let _ = writeln!(
        out,
        "{} iteration(s), {} suspicion(s), {} dismissed, {} unconfirmable, {} finding(s)",
        report.iterations,
        report.suspicions,
        report.dismissed,
        report.unconfirmable,
        report.findings.len()
    );
    let _ = writeln!(
        out,
        "{:<20} {:<26} {:>6} {:>7} {:>6}",
        "kind", "fingerprint", "iter", "repro", "dups"
    );
    for f in &report.findings {
        let _ = writeln!(
            out,
            "{:<20} {:<26} {:>6} {:>7} {:>6}",
            f.kind,
            f.fingerprint,
            f.iteration,
            format!("{}/{}", f.reproduced, f.replays),
            f.duplicates
        );
    }
    if let Some(best) = report
        .series
        .iter()
        .max_by(|a, b| a.s_total.total_cmp(&b.s_total))
    {
        let _ = writeln!(
            out,
            "pressure: {} point(s), peak {:.3} at iteration {}",
            report.series.len(),
            best.s_total,
            best.iteration
        );
    }
    Ok(EXIT_OK)
}
