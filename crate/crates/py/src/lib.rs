//! Python bindings. Traces, reports and summaries cross the boundary as JSON
//! strings so the Python side can use plain `json.loads`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use servefuzz_core::campaign::{score_pressure, Campaign, CampaignConfig};
use servefuzz_core::cli::profile_for_fault;
use servefuzz_core::confirm::{self, Verdict};
use servefuzz_core::exec::{Engine, ExecOptions, SimEngine};
use servefuzz_core::mutation::{generate_seed, SeedProfile};
use servefuzz_core::report::TokenLogprob;
use servefuzz_core::sim::{FaultSpec, SimConfig};
use servefuzz_core::trace::{self, TimedTrace};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sim_config(fault: Option<&str>) -> PyResult<SimConfig> {
    let mut sim = SimConfig::default();
    if let Some(name) = fault {
        let spec = FaultSpec::from_name(name)
            .ok_or_else(|| value_err(format!("unknown fault '{name}'")))?;
        sim = sim.with_fault(spec);
    }
    Ok(sim)
}

fn parse_trace(json: &str) -> PyResult<TimedTrace> {
    trace::deserialize(json.as_bytes()).map_err(value_err)
}

/// Seed trace for a named profile, as JSON.
#[pyfunction]
#[pyo3(signature = (profile, seed=0))]
fn seed_trace(profile: &str, seed: u64) -> PyResult<String> {
    let p = SeedProfile::by_name(profile)
        .ok_or_else(|| value_err(format!("unknown profile '{profile}'")))?;
    let t = generate_seed(&p, seed);
    String::from_utf8(trace::serialize(&t).map_err(value_err)?).map_err(value_err)
}

/// Runs a trace on a fresh in-process simulator and returns the report JSON.
#[pyfunction]
#[pyo3(signature = (trace_json, fault=None))]
fn execute_sim(trace_json: &str, fault: Option<&str>) -> PyResult<String> {
    let t = parse_trace(trace_json)?;
    let mut engine = SimEngine::new(sim_config(fault)?);
    let report = engine
        .execute(&t, &ExecOptions::default())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    serde_json::to_string(&report).map_err(value_err)
}

/// Runs a simulator campaign. `config_toml` overrides defaults; the keyword
/// arguments override the config. Returns the summary JSON.
#[pyfunction]
#[pyo3(signature = (config_toml=None, iterations=None, profile=None, seed=None, fault=None))]
fn run_campaign(
    py: Python<'_>,
    config_toml: Option<&str>,
    iterations: Option<u64>,
    profile: Option<String>,
    seed: Option<u64>,
    fault: Option<&str>,
) -> PyResult<String> {
    let mut cfg = match config_toml {
        Some(text) => CampaignConfig::from_toml(text).map_err(value_err)?,
        None => CampaignConfig::default(),
    };
    cfg.endpoint = None;
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    // Without an explicit profile, seed toward the armed fault.
    let profile = profile.or_else(|| fault.and_then(profile_for_fault).map(str::to_string));
    if let Some(p) = profile {
        cfg.profile = p;
        cfg.seed_profile = None;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(name) = fault {
        let spec = FaultSpec::from_name(name)
            .ok_or_else(|| value_err(format!("unknown fault '{name}'")))?;
        cfg.sim = cfg.sim.clone().with_fault(spec);
    }
    let summary = py
        .detach(|| Campaign::new(cfg).map(|mut c| c.run(|_| {})))
        .map_err(value_err)?;
    serde_json::to_string(&summary).map_err(value_err)
}

/// Relational confirmation over plain lists. `logprobs[p]` is a list of
/// `(token, logprob)` pairs sorted by descending logprob. Returns
/// "pass", "false_positive" or "true_positive".
#[pyfunction]
#[pyo3(signature = (original, replay, logprobs, n=5, epsilon=0.1))]
fn confirm_relational(
    original: Vec<u32>,
    replay: Vec<u32>,
    logprobs: Vec<Vec<(u32, f64)>>,
    n: usize,
    epsilon: f64,
) -> PyResult<&'static str> {
    let l: Vec<Vec<TokenLogprob>> = logprobs
        .into_iter()
        .map(|p| {
            p.into_iter()
                .map(|(token, logprob)| TokenLogprob { token, logprob })
                .collect()
        })
        .collect();
    let v = confirm::confirm_relational(&original, &replay, &l, n, epsilon).map_err(value_err)?;
    Ok(match v.verdict {
        Verdict::Pass => "pass",
        Verdict::FalsePositive => "false_positive",
        Verdict::TruePositive => "true_positive",
    })
}

#[pyfunction]
fn majority_threshold(k: usize) -> usize {
    confirm::majority_threshold(k)
}

#[pyfunction]
fn pressure_score(n_send: u64, n_adapter: u64, n_kv: u64, n_shape: u64) -> f64 {
    score_pressure(n_send, n_adapter, n_kv, n_shape).s_total
}

#[pymodule]
fn servefuzz(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(seed_trace, m)?)?;
    m.add_function(wrap_pyfunction!(execute_sim, m)?)?;
    m.add_function(wrap_pyfunction!(run_campaign, m)?)?;
    m.add_function(wrap_pyfunction!(confirm_relational, m)?)?;
    m.add_function(wrap_pyfunction!(majority_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(pressure_score, m)?)?;
    Ok(())
}
