//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use servefuzz_core::campaign::{
    crash_reproduces, score_pressure, Campaign, CampaignConfig, FindingRecord,
};
use servefuzz_core::confirm::{confirm_relational, majority_confirm, majority_threshold, Verdict};
use servefuzz_core::exec::{Engine, ExecOptions, SimEngine};
use servefuzz_core::mutation::{
    collapse, directed_splice, generate_seed, mutate_events, mutate_timing, splice, CutPolicy,
    Palette, SeedProfile,
};
use servefuzz_core::oracle::{Evidence, SuspicionKind};
use servefuzz_core::report::TokenLogprob;
use servefuzz_core::sim::{drift_condition, FaultSpec, NearTie, SimConfig};
use servefuzz_core::trace::{
    deserialize, serialize, EventAction, PromptShape, RequestSpec, SamplingConfig, TimedTrace,
    TraceEvent, BASE_ADAPTER,
};

type Outcome = Result<String, String>;

fn check(cond: bool, ok: impl Into<String>, bad: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(bad.into())
    }
}

// ---------------------------------------------------------------------------
// 1. Relational confirmation vs. a direct transcription

#[derive(Debug, PartialEq)]
enum Ref {
    Pass,
    FalsePositive,
    TruePositive,
    Gap,
}

/// Line-by-line: first difference, top-N of the distribution at p, the
/// replay token's advantage, and the membership test. A token the list does
/// not report has no logprob, so its advantage is undefined and the
/// comparison fails.
fn reference_alg(y: &[u32], y2: &[u32], l: &[Vec<(u32, f64)>], n: usize, eps: f64) -> Ref {
    let mut p = None;
    for i in 0..y.len().max(y2.len()) {
        if y.get(i) != y2.get(i) {
            p = Some(i);
            break;
        }
    }
    let Some(p) = p else { return Ref::Pass };
    let Some(lp) = l.get(p).filter(|v| !v.is_empty()) else {
        return Ref::Gap;
    };
    let mut ranked = lp.clone();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let t: Vec<u32> = ranked.iter().take(n).map(|c| c.0).collect();
    let lookup = |tok: Option<&u32>| {
        tok.and_then(|tok| lp.iter().find(|c| c.0 == *tok))
            .map(|c| c.1)
    };
    let delta = match (lookup(y2.get(p)), lookup(y.get(p))) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    let in_t = y.get(p).is_some_and(|tok| t.contains(tok));
    if in_t && delta.is_some_and(|d| d < eps) {
        Ref::FalsePositive
    } else {
        Ref::TruePositive
    }
}

fn sequences(alphabet: u32, max_len: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for t in 0..alphabet {
                let mut s2: Vec<u32> = s.clone();
                s2.push(t);
                next.push(s2);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Every ordered list of distinct tokens with non-increasing logprobs
/// drawn from `levels`.
fn candidate_lists(alphabet: u32, levels: &[f64]) -> Vec<Vec<(u32, f64)>> {
    fn orders(alphabet: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        out.push(cur.clone());
        for t in 0..alphabet {
            if !cur.contains(&t) {
                cur.push(t);
                orders(alphabet, cur, out);
                cur.pop();
            }
        }
    }
    fn level_seqs(
        len: usize,
        from: usize,
        levels: &[f64],
        cur: &mut Vec<f64>,
        out: &mut Vec<Vec<f64>>,
    ) {
        if cur.len() == len {
            out.push(cur.clone());
            return;
        }
        for i in from..levels.len() {
            cur.push(levels[i]);
            level_seqs(len, i, levels, cur, out);
            cur.pop();
        }
    }
    let mut ords = Vec::new();
    orders(alphabet, &mut Vec::new(), &mut ords);
    let mut lists = Vec::new();
    for o in ords {
        let mut lv = Vec::new();
        level_seqs(o.len(), 0, levels, &mut Vec::new(), &mut lv);
        for l in lv {
            lists.push(o.iter().copied().zip(l).collect());
        }
    }
    lists
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let alphabet = 4;
    let seqs = sequences(alphabet, 3);
    let lists = candidate_lists(alphabet, &[0.0, -0.05, -0.5]);
    let filler: Vec<TokenLogprob> = vec![TokenLogprob {
        token: 0,
        logprob: 0.0,
    }];
    let mut cases = 0u64;
    let mut l: Vec<Vec<TokenLogprob>> = Vec::new();
    let mut l_ref: Vec<Vec<(u32, f64)>> = Vec::new();
    for y in &seqs {
        for y2 in &seqs {
            let p = (0..y.len().max(y2.len())).find(|&i| y.get(i) != y2.get(i));
            let Some(p) = p else {
                for n in 1..=3 {
                    let v = confirm_relational(y, y2, &[], n, 0.0).map_err(|e| e.to_string())?;
                    if v.verdict != Verdict::Pass {
                        return Err(format!("{y:?} vs {y2:?}: expected pass"));
                    }
                    cases += 1;
                }
                continue;
            };
            // The list at p varies; other positions carry a fixed list. The
            // empty list at p is an instrumentation gap, as is a short L.
            for (li, lp) in lists.iter().enumerate() {
                for short in [false, true] {
                    if short && li > 0 {
                        break;
                    }
                    l.clear();
                    l_ref.clear();
                    if !short {
                        for _ in 0..p {
                            l.push(filler.clone());
                            l_ref.push(vec![(0, 0.0)]);
                        }
                        l.push(
                            lp.iter()
                                .map(|&(token, logprob)| TokenLogprob { token, logprob })
                                .collect(),
                        );
                        l_ref.push(lp.clone());
                    }
                    for n in 1..=3usize {
                        for eps in [0.0, 0.05, 0.5] {
                            cases += 1;
                            let want = reference_alg(y, y2, &l_ref, n, eps);
                            let got = match confirm_relational(y, y2, &l, n, eps) {
                                Ok(v) => match v.verdict {
                                    Verdict::Pass => Ref::Pass,
                                    Verdict::FalsePositive => Ref::FalsePositive,
                                    Verdict::TruePositive => Ref::TruePositive,
                                },
                                Err(_) => Ref::Gap,
                            };
                            if got != want {
                                return Err(format!(
                                    "y={y:?} y'={y2:?} L_p={lp:?} short={short} N={n} eps={eps}: got {got:?}, want {want:?}"
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs < 10.0,
        format!("{cases} cases agree in {secs:.1}s"),
        format!("{cases} cases agree but took {secs:.1}s"),
    )
}

// ---------------------------------------------------------------------------
// 2. Majority thresholds

fn criterion_2() -> Outcome {
    for k in 1..=12usize {
        let want = (2.0 * k as f64 / 3.0).ceil() as usize;
        if majority_threshold(k) != want {
            return Err(format!(
                "k={k}: threshold {} != {want}",
                majority_threshold(k)
            ));
        }
        for hits in 0..=k {
            let outcomes: Vec<bool> = (0..k).map(|i| i < hits).collect();
            if majority_confirm(&outcomes, k) != (hits >= want) {
                return Err(format!("k={k} hits={hits}: wrong decision"));
            }
        }
    }
    Ok("k=1..12 thresholds and decisions match the ceiling".into())
}

// ---------------------------------------------------------------------------
// 3. Pressure score

fn criterion_3() -> Outcome {
    let s = score_pressure(20, 6, 1500, 6).s_total;
    if (s - 4.0).abs() > 1e-9 {
        return Err(format!("reference point scored {s}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let (a, b, c, d) = (
            rng.gen_range(0..200u64),
            rng.gen_range(0..20u64),
            rng.gen_range(0..4000u64),
            rng.gen_range(0..30u64),
        );
        let direct = a as f64 / 20.0 + b as f64 / 6.0 + c as f64 / 1500.0 + d as f64 / 6.0;
        let got = score_pressure(a, b, c, d).s_total;
        if (got - direct).abs() > 1e-9 {
            return Err(format!("({a},{b},{c},{d}): {got} vs {direct}"));
        }
    }
    Ok("reference point is 4.0; 10 random tuples match".into())
}

// ---------------------------------------------------------------------------
// Planted faults

fn faulted(profile: &str, fault: FaultSpec, iterations: u64, seed: u64) -> CampaignConfig {
    let mut cfg = CampaignConfig {
        iterations,
        profile: profile.into(),
        seed,
        ..Default::default()
    };
    cfg.sim = cfg.sim.clone().with_fault(fault);
    cfg
}

fn is_alg1_corruption(f: &FindingRecord) -> bool {
    f.finding.kind.is_state_corruption()
        && f.finding
            .verdict
            .as_ref()
            .is_some_and(|v| v.verdict == Verdict::TruePositive)
}

fn criterion_4(f1: &mut Option<FindingRecord>) -> Outcome {
    let mut cfg = faulted("prefix_sharing", FaultSpec::stale_kv(), 5000, 0);
    cfg.time_budget_s = Some(600.0);
    let start = Instant::now();
    let mut campaign = Campaign::new(cfg).map_err(|e| e.to_string())?;
    let summary = campaign.run_until(
        |_| {},
        |found| {
            found.iter().any(is_alg1_corruption)
                && found
                    .iter()
                    .any(|f| f.finding.kind == SuspicionKind::HashConflict)
        },
    );
    let secs = start.elapsed().as_secs_f64();
    let Some(hit) = summary.findings.iter().find(|f| is_alg1_corruption(f)) else {
        return Err(format!(
            "no confirmed corruption in {} iterations",
            summary.iterations_run
        ));
    };
    *f1 = summary
        .findings
        .iter()
        .find(|f| f.finding.kind == SuspicionKind::HashConflict)
        .cloned();
    check(
        secs < 600.0,
        format!(
            "{} confirmed TruePositive at iteration {} ({secs:.1}s)",
            hit.finding.kind, hit.iteration
        ),
        format!("found but took {secs:.1}s"),
    )
}

fn criterion_5() -> Outcome {
    let cfg = faulted("interference", FaultSpec::engine_stall(), 2000, 0);
    let good = |f: &FindingRecord| {
        f.finding.kind.is_timing()
            && f.finding.timing.as_ref().is_some_and(|t| {
                t.recovered && t.amplification_vs_campaign.is_some_and(|a| a >= 100.0)
            })
    };
    let mut campaign = Campaign::new(cfg).map_err(|e| e.to_string())?;
    let summary = campaign.run_until(|_| {}, |found| found.iter().any(good));
    let Some(hit) = summary.findings.iter().find(|f| good(f)) else {
        return Err(format!(
            "no sustained timing finding in {} iterations ({} timing findings total)",
            summary.iterations_run,
            summary
                .findings
                .iter()
                .filter(|f| f.finding.kind.is_timing())
                .count()
        ));
    };
    let t = hit.finding.timing.as_ref().unwrap();
    Ok(format!(
        "{} on {} amplified {:.0}x vs campaign baseline, {} ms alone, recovered at {} ms",
        hit.finding.kind,
        t.victim,
        t.amplification_vs_campaign.unwrap(),
        t.replay_baseline_ttft_ms,
        t.recovery_ttft_ms
    ))
}

fn criterion_6() -> Outcome {
    let mut cfg = faulted("lora", FaultSpec::adapter_drift(), 2000, 0);
    cfg.minimize = true;
    cfg.time_budget_s = Some(300.0);
    let start = Instant::now();
    let mut campaign = Campaign::new(cfg.clone()).map_err(|e| e.to_string())?;
    let summary = campaign.run_until(
        |_| {},
        |found| found.iter().any(|f| f.finding.kind == SuspicionKind::Crash),
    );
    let secs = start.elapsed().as_secs_f64();
    let Some(hit) = summary
        .findings
        .iter()
        .find(|f| f.finding.kind == SuspicionKind::Crash)
    else {
        return Err(format!("no crash in {} iterations", summary.iterations_run));
    };
    if secs >= 300.0 {
        return Err(format!("crash found after {secs:.1}s"));
    }
    let Some(min) = &hit.minimized else {
        return Err("crash finding was not minimized".into());
    };
    let before = hit.trace.events.len();
    let after = min.trace.events.len();
    let mut engine = SimEngine::new(cfg.sim.clone());
    let opts = cfg.exec_options();
    let thresholds = cfg.thresholds();
    let k = 3;
    let reproduced = (0..k)
        .filter(|_| {
            crash_reproduces(
                &mut engine,
                &min.trace,
                &opts,
                &thresholds,
                &hit.finding.fingerprint,
            )
        })
        .count();
    check(
        after < before && reproduced >= majority_threshold(k),
        format!(
            "crash at iteration {} ({secs:.1}s); minimized {before} -> {after} events, reproduces {reproduced}/{k}",
            hit.iteration
        ),
        format!("minimized {before} -> {after} events, reproduces {reproduced}/{k}"),
    )
}

// ---------------------------------------------------------------------------
// 7. Single-axis immunity

fn request(id: String, shape: PromptShape, max_tokens: u32, adapter: &str) -> RequestSpec {
    let mut r = RequestSpec::new(id, shape);
    r.sampling = SamplingConfig::deterministic(max_tokens);
    r.adapter = (adapter != BASE_ADAPTER).then(|| adapter.to_string());
    r
}

/// Builds a schedule that sets exactly the drift conditions in `subset`.
/// Adapters the schedule uses are warmed first, except lora_b when an
/// in-flight load is wanted.
fn drift_template(subset: u8, jitter: u64) -> TimedTrace {
    use drift_condition::*;
    let small = PromptShape::new(0, 64);
    let mut events = Vec::new();
    let mut warm = vec!["lora_a", "lora_c"];
    if subset & LOAD_IN_FLIGHT == 0 {
        warm.push("lora_b");
    }
    for (i, a) in warm.iter().enumerate() {
        events.push(TraceEvent::send(
            i as u64,
            request(format!("w{i}"), small, 4, a),
        ));
    }
    let t0 = 100 + jitter;
    if subset & HIGH_OCCUPANCY != 0 {
        for i in 0..6 {
            events.push(TraceEvent::send(
                t0,
                request(format!("f{i}"), PromptShape::new(0, 4096), 16, BASE_ADAPTER),
            ));
        }
    }
    if subset & ADAPTER_MIX != 0 {
        for (i, a) in [BASE_ADAPTER, "lora_a", "lora_c"].iter().enumerate() {
            events.push(TraceEvent::send(
                t0 + 1,
                request(format!("m{i}"), small, 64, a),
            ));
        }
    }
    if subset & LOAD_IN_FLIGHT != 0 {
        events.push(TraceEvent::send(
            t0 + 2,
            request("l0".into(), small, 32, "lora_b"),
        ));
    }
    if subset & LORA_BURST != 0 {
        for i in 0..6u64 {
            events.push(TraceEvent::send(
                t0 + 5 + i,
                request(format!("b{i}"), small, 32, "lora_b"),
            ));
        }
    }
    events.sort_by_key(|e| e.offset_ms);
    TimedTrace::new(format!("drift-{subset:04b}-{jitter}"), events)
}

fn criterion_7() -> Outcome {
    let sim = SimConfig::default().with_fault(FaultSpec::adapter_drift());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut run = |subset: u8| -> Result<(usize, bool, bool), String> {
        let (mut crashes, mut reached, mut saw_all) = (0, true, false);
        for _ in 0..10 {
            let trace = drift_template(subset, rng.gen_range(0..5));
            let mut engine = SimEngine::new(sim.clone());
            let report = engine
                .execute(&trace, &ExecOptions::default())
                .map_err(|e| e.to_string())?;
            let masks = engine.telemetry().drift_masks;
            crashes += usize::from(report.server_crashed);
            reached &= masks.contains(&subset);
            saw_all |= masks.contains(&drift_condition::ALL);
        }
        Ok((crashes, reached, saw_all))
    };
    let mut runs = 0;
    for subset in 0..drift_condition::ALL {
        let (crashes, reached, saw_all) = run(subset)?;
        if crashes > 0 || saw_all {
            return Err(format!(
                "subset {subset:04b}: {crashes} crash(es), all-conditions tick seen: {saw_all}"
            ));
        }
        if !reached {
            return Err(format!(
                "subset {subset:04b}: template never reached its conditions"
            ));
        }
        runs += 10;
    }
    let (crashes, _, _) = run(drift_condition::ALL)?;
    check(
        crashes == 10,
        format!("{runs} subset runs, 0 crashes; all-conditions control crashed 10/10"),
        format!("subsets clean, but the all-conditions control crashed only {crashes}/10"),
    )
}

// ---------------------------------------------------------------------------
// 8. False-positive floor

fn criterion_8() -> Outcome {
    let clean = CampaignConfig {
        iterations: 500,
        profile: "mixed".into(),
        ..Default::default()
    };
    let s = Campaign::new(clean).map_err(|e| e.to_string())?.run(|_| {});
    if !s.findings.is_empty() {
        let kinds: BTreeSet<_> = s.findings.iter().map(|f| f.finding.kind.as_str()).collect();
        return Err(format!(
            "clean run filed {} finding(s): {kinds:?}",
            s.findings.len()
        ));
    }
    let mut tie = CampaignConfig {
        iterations: 60,
        profile: "mixed".into(),
        ..Default::default()
    };
    tie.sim.near_tie = Some(NearTie {
        gap: 0.01,
        flip_rate: 0.05,
    });
    let t = Campaign::new(tie).map_err(|e| e.to_string())?.run(|_| {});
    let relational: Vec<_> = t
        .dismissals
        .iter()
        .filter(|d| matches!(d.suspicion.evidence, Evidence::RelationalDivergence { .. }))
        .collect();
    let all_fp = relational.iter().all(|d| {
        d.verdict
            .as_ref()
            .is_some_and(|v| v.verdict == Verdict::FalsePositive)
    });
    check(
        t.findings.is_empty() && relational.len() >= 20 && all_fp,
        format!(
            "clean: {} iterations, 0 findings; near-tie: {} divergences all dismissed as FalsePositive",
            s.iterations_run,
            relational.len()
        ),
        format!(
            "near-tie: {} findings, {} divergence dismissals, all FalsePositive: {all_fp}",
            t.findings.len(),
            relational.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Trigger-prompt invariance

fn criterion_9(f1: Option<&FindingRecord>) -> Outcome {
    let f1 = f1.ok_or("no F1 hash-conflict finding to replay")?;
    let Evidence::BlockReuse { incidents } = &f1.finding.suspicion.evidence else {
        return Err("F1 finding carries no block incidents".into());
    };
    let incident = incidents.first().ok_or("empty incident list")?;
    let (trigger, victim) = (&incident.owner_request_id, &incident.reuser_request_id);
    let sim = SimConfig::default().with_fault(FaultSpec::stale_kv());
    let victim_output = |trace: &TimedTrace, sim: &SimConfig| -> Result<Vec<Vec<u32>>, String> {
        let mut engine = SimEngine::new(sim.clone());
        let report = engine
            .execute(trace, &ExecOptions::default())
            .map_err(|e| e.to_string())?;
        Ok(report
            .outcome(victim)
            .ok_or("victim missing")?
            .output_tokens
            .clone())
    };
    let original = victim_output(&f1.trace, &sim)?;
    let clean = victim_output(&f1.trace, &SimConfig::default())?;
    if original == clean {
        return Err(format!("victim {victim} output is not corrupted on replay"));
    }
    for variant in ["unrelated-alpha", "unrelated-beta", "unrelated-gamma"] {
        let mut t = f1.trace.clone();
        for e in &mut t.events {
            if let EventAction::Send { request } = &mut e.action {
                if request.request_id == *trigger {
                    request.prompt_family_id = Some(variant.into());
                }
            }
        }
        if victim_output(&t, &sim)? != original {
            return Err(format!(
                "victim output changed with trigger prompt {variant}"
            ));
        }
    }
    Ok(format!(
        "victim {victim} corrupted output identical across 3 trigger prompts for {trigger}"
    ))
}

// ---------------------------------------------------------------------------
// 10. Determinism and round-trips

fn criterion_10() -> Outcome {
    let cfg = faulted("prefix_sharing", FaultSpec::stale_kv(), 150, 2);
    let a = Campaign::new(cfg.clone())
        .map_err(|e| e.to_string())?
        .run(|_| {});
    let b = Campaign::new(cfg).map_err(|e| e.to_string())?.run(|_| {});
    if a.fingerprints().is_empty() {
        return Err("reproducibility run found nothing to compare".into());
    }
    if a.fingerprints() != b.fingerprints() || a.executed != b.executed {
        return Err("two runs with one seed diverged".into());
    }
    let profiles = ["prefix_sharing", "lora", "interference", "mixed"];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let random_trace = |rng: &mut ChaCha8Rng| {
        let p = SeedProfile::by_name(profiles[rng.gen_range(0..profiles.len())]).unwrap();
        let t = generate_seed(&p, rng.gen());
        let palette = Palette::from_profile(&p);
        match rng.gen_range(0..3) {
            0 => t,
            1 => mutate_events(&t, rng.gen(), &palette).0,
            _ => mutate_timing(&t, rng.gen(), 1.0),
        }
    };
    for i in 0..1000 {
        let t = random_trace(&mut rng);
        let bytes = serialize(&t).map_err(|e| e.to_string())?;
        if deserialize(&bytes).map_err(|e| e.to_string())? != t {
            return Err(format!("round-trip {i} changed the trace"));
        }
    }
    let mut pool: Vec<TimedTrace> = (0..16).map(|_| random_trace(&mut rng)).collect();
    for i in 0..10_000 {
        let a = &pool[rng.gen_range(0..pool.len())];
        let b = &pool[rng.gen_range(0..pool.len())];
        let p = SeedProfile::by_name(profiles[rng.gen_range(0..profiles.len())]).unwrap();
        let child = match rng.gen_range(0..6) {
            0 => mutate_events(a, rng.gen(), &Palette::from_profile(&p)).0,
            1 => mutate_timing(a, rng.gen(), rng.gen_range(0.0..2.0)),
            2 => collapse(a, rng.gen()),
            3 => splice(a, b, CutPolicy::Random, rng.gen()),
            4 => splice(a, b, CutPolicy::Midpoint, rng.gen()),
            _ => directed_splice(a, b, None, None, 50, rng.gen()),
        };
        let v = child.validate();
        if !v.is_ok() {
            return Err(format!(
                "mutation {i} produced an invalid trace: {:?}",
                v.violations
            ));
        }
        let slot = rng.gen_range(0..pool.len());
        pool[slot] = child;
    }
    Ok(format!(
        "{} identical fingerprints over two runs; 1000 round-trips; 10000 valid mutations",
        a.fingerprints().len()
    ))
}

fn main() {
    let mut f1 = None;
    let mut failed = 0;
    let mut report = |n: u32, started: Instant, out: Outcome| {
        let secs = Duration::as_secs_f64(&started.elapsed());
        match out {
            Ok(msg) => println!("criterion {n:2}: PASS ({secs:.1}s) {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n:2}: FAIL ({secs:.1}s) {msg}");
            }
        }
    };
    let t = Instant::now();
    report(1, t, criterion_1());
    let t = Instant::now();
    report(2, t, criterion_2());
    let t = Instant::now();
    report(3, t, criterion_3());
    let t = Instant::now();
    report(4, t, criterion_4(&mut f1));
    let t = Instant::now();
    report(5, t, criterion_5());
    let t = Instant::now();
    report(6, t, criterion_6());
    let t = Instant::now();
    report(7, t, criterion_7());
    let t = Instant::now();
    report(8, t, criterion_8());
    let t = Instant::now();
    report(9, t, criterion_9(f1.as_ref()));
    let t = Instant::now();
    report(10, t, criterion_10());
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
