//! Execution adapter: runs traces against an engine and collects telemetry.
//!
//! [`Engine`] is the seam between the fuzzer and whatever serves requests.
//! [`SimEngine`] drives an in-process simulator on a logical clock;
//! [`HttpEngine`] talks to an OpenAI-style completion server.

mod http;
mod sim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::ExecutionReport;
use crate::trace::{
    EventAction, PromptSynthesizer, TimedTrace, Token, TraceEvent, ValidationReport, BASE_ADAPTER,
};

pub use http::{collect_kv_stream, HttpEngine};
pub use sim::SimEngine;

pub const DEFAULT_SCHEDULE_TOLERANCE_MS: u64 = 5;
pub const DEFAULT_REQUEST_TIMEOUT_MS: u64 = 60_000;
pub const DEFAULT_KV_GRACE_MS: u64 = 2_000;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("operation unsupported by endpoint: {0}")]
    Unsupported(String),
    #[error("trace is invalid ({} violation(s))", .0.violations.len())]
    InvalidTrace(ValidationReport),
    #[error("transport failure: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Simulator,
    GenericOpenaiCompatible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineEndpoint {
    pub base_url: String,
    pub engine_kind: EngineKind,
    #[serde(default)]
    pub config_flags: BTreeMap<String, String>,
    #[serde(default = "default_health_timeout")]
    pub health_timeout_ms: u64,
}

fn default_health_timeout() -> u64 {
    5_000
}

impl EngineEndpoint {
    pub fn new(base_url: impl Into<String>, engine_kind: EngineKind) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            engine_kind,
            config_flags: BTreeMap::new(),
            health_timeout_ms: default_health_timeout(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecOptions {
    pub schedule_tolerance_ms: u64,
    pub request_timeout_ms: u64,
    /// Time the engine gets after the last request ends to release KV blocks.
    pub kv_grace_ms: u64,
    pub synth: PromptSynthesizer,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            schedule_tolerance_ms: DEFAULT_SCHEDULE_TOLERANCE_MS,
            request_timeout_ms: DEFAULT_REQUEST_TIMEOUT_MS,
            kv_grace_ms: DEFAULT_KV_GRACE_MS,
            synth: PromptSynthesizer::default(),
        }
    }
}

pub trait Engine: Send {
    fn execute(
        &mut self,
        trace: &TimedTrace,
        opts: &ExecOptions,
    ) -> Result<ExecutionReport, ExecError>;

    /// Returns the engine to launch state.
    fn reset(&mut self) -> Result<(), ExecError>;

    fn healthy(&mut self) -> bool;

    fn supports_logprobs(&self) -> bool {
        true
    }

    fn kind(&self) -> EngineKind;
}

/// Completion request body, OpenAI-style with a token-array prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionBody {
    pub model: String,
    pub prompt: Vec<Token>,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<u32>,
    pub n: u32,
    pub stream: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
    #[serde(default)]
    pub request_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ApiCall {
    Completion {
        path: String,
        body: CompletionBody,
    },
    /// Graceful cancellation through an engine endpoint.
    CancelEndpoint {
        path: String,
    },
    /// Drop the client connection without telling the server.
    TransportAbort {
        request_id: String,
    },
    /// Pure scheduling delay.
    NoCall {
        delay_ms: u64,
    },
}

/// Translates one trace event into the engine API call that realizes it.
pub fn map_event(
    event: &TraceEvent,
    kind: EngineKind,
    synth: &PromptSynthesizer,
    flags: &BTreeMap<String, String>,
) -> ApiCall {
    match &event.action {
        EventAction::Send { request } => {
            let model = match &request.adapter {
                Some(a) => a.clone(),
                None => flags
                    .get("model")
                    .cloned()
                    .unwrap_or_else(|| BASE_ADAPTER.to_string()),
            };
            ApiCall::Completion {
                path: "/v1/completions".into(),
                body: CompletionBody {
                    model,
                    prompt: synth.synthesize_request(request),
                    max_tokens: request.sampling.max_tokens,
                    temperature: request.sampling.temperature,
                    seed: request.sampling.seed,
                    logprobs: request.sampling.logprobs,
                    n: request.sampling.n_completions,
                    stream: request.stream,
                    adapter: request.adapter.clone(),
                    request_id: request.request_id.clone(),
                },
            }
        }
        EventAction::Cancel { target } => match kind {
            EngineKind::Simulator => ApiCall::CancelEndpoint {
                path: format!("/v1/cancel/{target}"),
            },
            EngineKind::GenericOpenaiCompatible => ApiCall::TransportAbort {
                request_id: target.clone(),
            },
        },
        EventAction::Disconnect { target } => ApiCall::TransportAbort {
            request_id: target.clone(),
        },
        EventAction::Wait { duration_ms } => ApiCall::NoCall {
            delay_ms: *duration_ms,
        },
    }
}

fn check_trace(trace: &TimedTrace) -> Result<(), ExecError> {
    let report = trace.validate();
    if report.is_ok() {
        Ok(())
    } else {
        Err(ExecError::InvalidTrace(report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{PromptShape, RequestSpec};

    fn flags() -> BTreeMap<String, String> {
        BTreeMap::new()
    }

    #[test]
    fn send_maps_to_completion_with_logprobs() {
        let mut req = RequestSpec::new("r1", PromptShape::new(8, 24));
        req.sampling.logprobs = Some(5);
        req.sampling.temperature = 0.0;
        req.adapter = Some("lora_a".into());
        let call = map_event(
            &TraceEvent::send(0, req),
            EngineKind::Simulator,
            &PromptSynthesizer::default(),
            &flags(),
        );
        match call {
            ApiCall::Completion { path, body } => {
                assert_eq!(path, "/v1/completions");
                assert_eq!(body.logprobs, Some(5));
                assert_eq!(body.temperature, 0.0);
                assert_eq!(body.prompt.len(), 24);
                assert_eq!(body.model, "lora_a");
                assert_eq!(body.request_id, "r1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn disconnect_is_transport_abort() {
        for kind in [EngineKind::Simulator, EngineKind::GenericOpenaiCompatible] {
            let call = map_event(
                &TraceEvent::disconnect(3, "r1"),
                kind,
                &PromptSynthesizer::default(),
                &flags(),
            );
            assert_eq!(
                call,
                ApiCall::TransportAbort {
                    request_id: "r1".into()
                }
            );
        }
    }

    #[test]
    fn cancel_depends_on_engine_kind() {
        let synth = PromptSynthesizer::default();
        assert_eq!(
            map_event(
                &TraceEvent::cancel(0, "x"),
                EngineKind::Simulator,
                &synth,
                &flags()
            ),
            ApiCall::CancelEndpoint {
                path: "/v1/cancel/x".into()
            }
        );
        assert_eq!(
            map_event(
                &TraceEvent::cancel(0, "x"),
                EngineKind::GenericOpenaiCompatible,
                &synth,
                &flags()
            ),
            ApiCall::TransportAbort {
                request_id: "x".into()
            }
        );
    }

    #[test]
    fn wait_is_no_call() {
        let call = map_event(
            &TraceEvent::wait(0, 40),
            EngineKind::Simulator,
            &PromptSynthesizer::default(),
            &flags(),
        );
        assert_eq!(call, ApiCall::NoCall { delay_ms: 40 });
    }
}
