use std::fs;
use std::path::{Path, PathBuf};

use servefuzz_core::cli::{run_cli, EXIT_ENDPOINT, EXIT_FINDINGS, EXIT_OK, EXIT_USAGE};
use servefuzz_core::trace::{serialize, PromptShape, RequestSpec, TimedTrace, TraceEvent};

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn cli(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("servefuzz").chain(args.iter().copied());
    let code = run_cli(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_trace(dir: &Path) -> PathBuf {
    let events = (0..4)
        .map(|i| {
            TraceEvent::send(
                i * 3,
                RequestSpec::new(format!("r{i}"), PromptShape::new(32, 96)),
            )
        })
        .collect();
    let path = dir.join("small.trace.json");
    fs::write(&path, serialize(&TimedTrace::new("small", events)).unwrap()).unwrap();
    path
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cli(&[]).code, EXIT_USAGE);
    assert_eq!(cli(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(
        cli(&["run", "--config", "/nonexistent/campaign.toml"]).code,
        EXIT_USAGE
    );
    assert_eq!(
        cli(&["run", "--fault", "F1"]).code,
        EXIT_USAGE,
        "--fault needs --sim"
    );
    assert_eq!(cli(&["run", "--sim", "--fault", "F9"]).code, EXIT_USAGE);
    assert_eq!(cli(&["report", "/nonexistent/dir"]).code, EXIT_USAGE);
    assert_eq!(cli(&["--help"]).code, EXIT_OK);
}

#[test]
fn run_without_target_is_a_usage_error() {
    if std::env::var_os("SERVEFUZZ_ENDPOINT").is_some() {
        return;
    }
    let r = cli(&["run", "--budget", "1"]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("no target"), "{}", r.err);
}

#[test]
fn replay_is_deterministic_and_rejects_k0() {
    let dir = tempfile::tempdir().unwrap();
    let trace = small_trace(dir.path());
    let r = cli(&["replay", s(&trace), "--sim", "--k", "3"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.contains("3/3 identical"), "{}", r.out);
    assert_eq!(
        cli(&["replay", s(&trace), "--sim", "--k", "0"]).code,
        EXIT_USAGE
    );

    fs::write(dir.path().join("bad.json"), "{\"not\": \"a trace\"}").unwrap();
    assert_eq!(
        cli(&["replay", s(&dir.path().join("bad.json")), "--sim"]).code,
        EXIT_USAGE
    );
}

#[test]
fn unreachable_endpoint_exits_3_and_keeps_partials() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("camp");
    let r = cli(&[
        "run",
        "--endpoint",
        "http://127.0.0.1:9",
        "--budget",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.code, EXIT_ENDPOINT, "{}{}", r.out, r.err);
    assert!(out.join("summary.json").exists());
}

#[test]
fn minimize_refuses_a_non_crashing_input() {
    let dir = tempfile::tempdir().unwrap();
    let trace = small_trace(dir.path());
    assert_eq!(cli(&["minimize", s(&trace), "--sim"]).code, EXIT_ENDPOINT);
    assert_eq!(
        cli(&["minimize", s(&trace), "--sim", "--k", "0"]).code,
        EXIT_USAGE
    );
}

#[test]
fn clean_campaign_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("clean");
    let r = cli(&["run", "--sim", "--budget", "40", "--out", s(&out)]);
    assert_eq!(r.code, EXIT_OK, "{}{}", r.out, r.err);
    let rep = cli(&["report", s(&out), "--json"]);
    assert_eq!(rep.code, EXIT_OK, "{}", rep.err);
    let v: serde_json::Value = serde_json::from_str(&rep.out).unwrap();
    assert_eq!(v["findings"].as_array().unwrap().len(), 0);
}

#[test]
fn f3_campaign_finds_crash_reports_it_and_minimizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f3");
    let r = cli(&[
        "run",
        "--sim",
        "--fault",
        "F3",
        "--budget",
        "2000",
        "--stop-after",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.code, EXIT_FINDINGS, "{}{}", r.out, r.err);
    assert!(r.out.contains("crash"), "{}", r.out);

    let csv = dir.path().join("series.csv");
    let rep = cli(&["report", s(&out), "--plot-data", s(&csv)]);
    assert_eq!(rep.code, EXIT_OK, "{}", rep.err);
    assert!(rep.out.contains("crash"), "{}", rep.out);
    let series = fs::read_to_string(&csv).unwrap();
    let mut lines = series.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let parts = ["burst", "multi_adapter", "kv_pressure", "shape_diversity"].map(col);
    let (total, flag) = (col("s_total"), col("finding"));
    let mut flagged = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let sum: f64 = parts.iter().map(|&i| f[i].parse::<f64>().unwrap()).sum();
        assert!(
            (sum - f[total].parse::<f64>().unwrap()).abs() < 1e-5,
            "{line}"
        );
        flagged += usize::from(f[flag] == "1" || f[flag] == "true");
    }
    assert!(flagged >= 1, "no iteration flagged in {series}");

    let crash_trace = fs::read_dir(out.join("findings"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| {
            let name = p.file_name().unwrap().to_str().unwrap();
            name.ends_with(".trace.json") && !name.ends_with(".minimized.trace.json")
        })
        .expect("finding trace written");
    let min_path = dir.path().join("min.trace.json");
    let m = cli(&[
        "minimize",
        s(&crash_trace),
        "--sim",
        "--fault",
        "F3",
        "--out",
        s(&min_path),
    ]);
    assert_eq!(m.code, EXIT_OK, "{}{}", m.out, m.err);
    let original = servefuzz_core::trace::deserialize(&fs::read(&crash_trace).unwrap()).unwrap();
    let minimized = servefuzz_core::trace::deserialize(&fs::read(&min_path).unwrap()).unwrap();
    assert!(minimized.events.len() <= original.events.len());

    // Minimizing a minimal trace removes nothing.
    let again = dir.path().join("again.trace.json");
    let m2 = cli(&[
        "minimize",
        s(&min_path),
        "--sim",
        "--fault",
        "F3",
        "--out",
        s(&again),
    ]);
    assert_eq!(m2.code, EXIT_OK, "{}{}", m2.out, m2.err);
    let log = fs::read_to_string(again.with_extension("log")).unwrap();
    assert!(log.contains("no events removed"), "{log}");
}

#[test]
fn empty_campaign_report_is_vacuous() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let r = cli(&["run", "--sim", "--budget", "0", "--out", s(&out)]);
    assert_eq!(r.code, EXIT_OK, "{}{}", r.out, r.err);
    assert_eq!(cli(&["report", s(&out)]).code, EXIT_OK);
}
