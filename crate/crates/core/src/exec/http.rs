use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use futures::StreamExt;
use tokio::runtime::Runtime;
use tokio::task::JoinHandle;

use super::{
    check_trace, map_event, ApiCall, CompletionBody, Engine, EngineEndpoint, EngineKind, ExecError,
    ExecOptions,
};
use crate::hashing::hash_str;
use crate::report::{
    CrashEvidence, ExecutionReport, KvEvent, KvEventKind, RequestOutcome, RequestStatus,
    TokenLogprob,
};
use crate::sim::server::{CompletionResponse, HealthStatus, StreamChunk};
use crate::trace::{EventAction, TimedTrace, Token};

const KV_POLL_MS: u64 = 20;

/// KV events collected from an engine side stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvStream {
    pub events: Vec<KvEvent>,
    /// False when the engine exposes no stream.
    pub available: bool,
}

/// Reads the KV side stream from record `since` onward.
pub async fn collect_kv_stream(
    client: &reqwest::Client,
    endpoint: &EngineEndpoint,
    since: usize,
) -> KvStream {
    if endpoint.engine_kind != EngineKind::Simulator {
        return KvStream::default();
    }
    let url = format!("{}/kv_events?since={since}", endpoint.base_url);
    let Ok(resp) = client.get(url).send().await else {
        return KvStream::default();
    };
    if !resp.status().is_success() {
        return KvStream::default();
    }
    let Ok(body) = resp.text().await else {
        return KvStream::default();
    };
    let mut events: Vec<KvEvent> = body
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect();
    events.sort_by_key(|e| e.ts);
    KvStream {
        events,
        available: true,
    }
}

/// Client for a live completion endpoint.
pub struct HttpEngine {
    endpoint: EngineEndpoint,
    client: reqwest::Client,
    rt: Runtime,
}

impl HttpEngine {
    pub fn new(endpoint: EngineEndpoint) -> Result<Self, ExecError> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()
            .map_err(|e| ExecError::Transport(e.to_string()))?;
        let client = reqwest::Client::builder()
            .pool_max_idle_per_host(0)
            .build()
            .map_err(|e| ExecError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint,
            client,
            rt,
        })
    }

    pub fn endpoint(&self) -> &EngineEndpoint {
        &self.endpoint
    }

    async fn health(client: &reqwest::Client, endpoint: &EngineEndpoint) -> Option<HealthStatus> {
        let url = match endpoint.engine_kind {
            EngineKind::Simulator => format!("{}/health", endpoint.base_url),
            EngineKind::GenericOpenaiCompatible => format!("{}/v1/models", endpoint.base_url),
        };
        let resp = client
            .get(url)
            .timeout(Duration::from_millis(endpoint.health_timeout_ms))
            .send()
            .await
            .ok()?;
        if !resp.status().is_success() {
            return None;
        }
        match endpoint.engine_kind {
            EngineKind::Simulator => {
                let h: HealthStatus = resp.json().await.ok()?;
                (h.status == "ok").then_some(h)
            }
            EngineKind::GenericOpenaiCompatible => Some(HealthStatus {
                status: "ok".into(),
                now_ms: 0,
                kv_events: 0,
            }),
        }
    }

    async fn run(
        client: reqwest::Client,
        endpoint: EngineEndpoint,
        trace: TimedTrace,
        opts: ExecOptions,
    ) -> Result<ExecutionReport, ExecError> {
        let health = Self::health(&client, &endpoint)
            .await
            .ok_or_else(|| ExecError::Unreachable(endpoint.base_url.clone()))?;
        let server_epoch = health.now_ms;
        let t0 = Instant::now();

        // KV consumer runs alongside dispatch.
        let kv_done = Arc::new(AtomicBool::new(false));
        let kv_events: Arc<Mutex<Vec<KvEvent>>> = Arc::new(Mutex::new(Vec::new()));
        let kv_available = Arc::new(AtomicBool::new(
            endpoint.engine_kind == EngineKind::Simulator,
        ));
        let kv_task = {
            let (client, endpoint) = (client.clone(), endpoint.clone());
            let (done, sink, avail) = (kv_done.clone(), kv_events.clone(), kv_available.clone());
            let mut cursor = health.kv_events;
            tokio::spawn(async move {
                loop {
                    let last = done.load(Ordering::SeqCst);
                    if avail.load(Ordering::SeqCst) {
                        let got = collect_kv_stream(&client, &endpoint, cursor).await;
                        cursor += got.events.len();
                        sink.lock().expect("kv sink").extend(got.events);
                    }
                    if last {
                        break;
                    }
                    tokio::time::sleep(Duration::from_millis(KV_POLL_MS)).await;
                }
            })
        };

        let mut slots: Vec<Arc<Mutex<RequestOutcome>>> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut tasks: Vec<Option<JoinHandle<()>>> = Vec::new();
        let mut degraded = false;

        for event in &trace.events {
            tokio::time::sleep_until((t0 + Duration::from_millis(event.offset_ms)).into()).await;
            let now_ms = t0.elapsed().as_millis() as u64;
            match map_event(
                event,
                endpoint.engine_kind,
                &opts.synth,
                &endpoint.config_flags,
            ) {
                ApiCall::Completion { path, body } => {
                    if now_ms.saturating_sub(event.offset_ms) > opts.schedule_tolerance_ms {
                        degraded = true;
                    }
                    let n = body.n.max(1) as usize;
                    let mut outcome =
                        RequestOutcome::pending(&body.request_id, event.offset_ms, now_ms, n);
                    if body.logprobs.is_some() {
                        outcome.logprob_records = Some(vec![Vec::new(); n]);
                    }
                    let slot = Arc::new(Mutex::new(outcome));
                    index.insert(body.request_id.clone(), slots.len());
                    slots.push(slot.clone());
                    let url = format!("{}{}", endpoint.base_url, path);
                    let client = client.clone();
                    let timeout = Duration::from_millis(opts.request_timeout_ms);
                    tasks.push(Some(tokio::spawn(async move {
                        let run = request_task(client, url, body, slot.clone(), t0);
                        if tokio::time::timeout(timeout, run).await.is_err() {
                            let mut o = slot.lock().expect("slot");
                            o.status = RequestStatus::Timeout;
                            o.total_ms = t0.elapsed().as_millis() as u64 - o.dispatch_ms;
                            o.error_detail = Some("client timeout".into());
                        }
                    })));
                }
                ApiCall::CancelEndpoint { path } => {
                    let target = event.control_target().unwrap_or_default().to_string();
                    abort_request(
                        &index,
                        &slots,
                        &mut tasks,
                        &target,
                        RequestStatus::Cancelled,
                        t0,
                    );
                    let _ = client
                        .post(format!("{}{}", endpoint.base_url, path))
                        .send()
                        .await;
                }
                ApiCall::TransportAbort { request_id } => {
                    let status = match event.action {
                        EventAction::Cancel { .. } => RequestStatus::Cancelled,
                        _ => RequestStatus::Disconnected,
                    };
                    abort_request(&index, &slots, &mut tasks, &request_id, status, t0);
                }
                ApiCall::NoCall { .. } => {}
            }
        }
        for task in tasks.iter_mut().filter_map(Option::take) {
            let _ = task.await;
        }
        let span = trace.span_ms();
        if (t0.elapsed().as_millis() as u64) < span {
            tokio::time::sleep_until((t0 + Duration::from_millis(span)).into()).await;
        }

        let mut outcomes: Vec<RequestOutcome> = slots
            .iter()
            .map(|s| s.lock().expect("slot").clone())
            .collect();
        let last_terminal = outcomes
            .iter()
            .map(RequestOutcome::end_ms)
            .max()
            .unwrap_or(0);

        let lost = outcomes
            .iter()
            .filter(|o| o.status == RequestStatus::ServerError)
            .filter(|o| {
                o.error_detail
                    .as_deref()
                    .is_some_and(|d| d.starts_with("connection"))
            })
            .map(RequestOutcome::end_ms)
            .min();
        let alive = Self::health(&client, &endpoint).await.is_some();
        let crash = match (alive, lost) {
            (false, at) => Some(CrashEvidence {
                at_ms: at.unwrap_or(last_terminal),
                detail: "endpoint stopped responding".into(),
                recent_log: Vec::new(),
            }),
            _ => None,
        };
        if let Some(c) = &crash {
            for o in outcomes.iter_mut().filter(|o| o.end_ms() >= c.at_ms) {
                if o.status == RequestStatus::Completed {
                    continue;
                }
                o.status = RequestStatus::ServerError;
            }
        } else {
            // Give the engine its grace period to return blocks.
            let deadline = t0 + Duration::from_millis(last_terminal + opts.kv_grace_ms);
            while Instant::now() < deadline && kv_available.load(Ordering::SeqCst) {
                if held(&kv_events.lock().expect("kv sink")) == 0 {
                    break;
                }
                tokio::time::sleep(Duration::from_millis(KV_POLL_MS)).await;
            }
        }
        kv_done.store(true, Ordering::SeqCst);
        let _ = kv_task.await;

        let mut kv: Vec<KvEvent> = std::mem::take(&mut *kv_events.lock().expect("kv sink"));
        for ev in &mut kv {
            ev.ts = ev.ts.saturating_sub(server_epoch);
        }
        let mut annotations = BTreeMap::new();
        annotations.insert("engine".into(), format!("{:?}", endpoint.engine_kind));
        Ok(ExecutionReport {
            trace_id: trace.trace_id.clone(),
            outcomes,
            kv_events: kv,
            kv_stream_available: kv_available.load(Ordering::SeqCst),
            server_crashed: crash.is_some(),
            crash,
            wall_clock_span_ms: t0.elapsed().as_millis() as u64,
            last_terminal_ms: last_terminal,
            schedule_degraded: degraded,
            annotations,
        })
    }
}

fn held(events: &[KvEvent]) -> i64 {
    events
        .iter()
        .map(|e| match e.kind {
            KvEventKind::Alloc | KvEventKind::Reuse => 1,
            KvEventKind::Free => -1,
            _ => 0,
        })
        .sum()
}

fn abort_request(
    index: &BTreeMap<String, usize>,
    slots: &[Arc<Mutex<RequestOutcome>>],
    tasks: &mut [Option<JoinHandle<()>>],
    target: &str,
    status: RequestStatus,
    t0: Instant,
) {
    let Some(&i) = index.get(target) else {
        return;
    };
    let Some(task) = tasks[i].take() else {
        return;
    };
    if task.is_finished() {
        return;
    }
    task.abort();
    let mut o = slots[i].lock().expect("slot");
    o.status = status;
    o.total_ms = t0.elapsed().as_millis() as u64 - o.dispatch_ms;
}

/// Maps a token to an id. Engines that only return text get a stable hash.
fn token_of(token_id: Option<Token>, text: &str) -> Token {
    token_id.unwrap_or_else(|| (hash_str(text) & 0x7fff_ffff) as Token)
}

async fn request_task(
    client: reqwest::Client,
    url: String,
    body: CompletionBody,
    slot: Arc<Mutex<RequestOutcome>>,
    t0: Instant,
) {
    let elapsed = || t0.elapsed().as_millis() as u64;
    let finish = |status: RequestStatus, detail: Option<String>| {
        let mut o = slot.lock().expect("slot");
        o.status = status;
        o.total_ms = elapsed() - o.dispatch_ms;
        o.error_detail = detail;
    };
    let resp = match client.post(url).json(&body).send().await {
        Ok(r) => r,
        Err(e) => {
            return finish(
                RequestStatus::ServerError,
                Some(format!("connection refused: {e}")),
            )
        }
    };
    if !resp.status().is_success() {
        let code = resp.status();
        let text = resp.text().await.unwrap_or_default();
        return finish(
            RequestStatus::ServerError,
            Some(format!("http {code}: {text}")),
        );
    }

    if !body.stream {
        let parsed: Result<CompletionResponse, _> = resp.json().await;
        let Ok(parsed) = parsed else {
            return finish(
                RequestStatus::ServerError,
                Some("connection lost before response".into()),
            );
        };
        let now = elapsed();
        let mut o = slot.lock().expect("slot");
        for choice in parsed.choices {
            let i = choice.index as usize;
            if i >= o.output_tokens.len() {
                continue;
            }
            o.output_tokens[i] = choice.token_ids;
            if let (Some(records), Some(lps)) = (&mut o.logprob_records, choice.top_logprobs) {
                records[i] = lps;
            }
        }
        if o.tokens_received() > 0 {
            o.ttft_ms = Some(now - o.dispatch_ms);
            o.token_times_ms.push(now);
        }
        o.status = RequestStatus::Completed;
        o.total_ms = now - o.dispatch_ms;
        return;
    }

    let mut stream = resp.bytes_stream();
    let mut buf = String::new();
    while let Some(chunk) = stream.next().await {
        let Ok(bytes) = chunk else {
            return finish(
                RequestStatus::ServerError,
                Some("connection lost mid-stream".into()),
            );
        };
        buf.push_str(&String::from_utf8_lossy(&bytes));
        while let Some(pos) = buf.find('\n') {
            let line: String = buf.drain(..=pos).collect();
            let Some(data) = line.trim().strip_prefix("data:") else {
                continue;
            };
            let data = data.trim();
            if data == "[DONE]" {
                return finish(RequestStatus::Completed, None);
            }
            let Ok(parsed) = serde_json::from_str::<StreamChunk>(data) else {
                continue;
            };
            let now = elapsed();
            let mut o = slot.lock().expect("slot");
            for choice in parsed.choices {
                let i = choice.index as usize;
                if i >= o.output_tokens.len() {
                    continue;
                }
                o.output_tokens[i].push(token_of(choice.token_id, &choice.text));
                if let (Some(records), Some(lp)) = (&mut o.logprob_records, choice.top_logprobs) {
                    records[i].push(lp.into_iter().collect::<Vec<TokenLogprob>>());
                }
                if o.ttft_ms.is_none() {
                    o.ttft_ms = Some(now - o.dispatch_ms);
                }
                if o.token_times_ms.last() != Some(&now) {
                    o.token_times_ms.push(now);
                }
            }
        }
    }
    finish(
        RequestStatus::ServerError,
        Some("connection lost mid-stream".into()),
    );
}

impl Engine for HttpEngine {
    fn execute(
        &mut self,
        trace: &TimedTrace,
        opts: &ExecOptions,
    ) -> Result<ExecutionReport, ExecError> {
        check_trace(trace)?;
        let fut = Self::run(
            self.client.clone(),
            self.endpoint.clone(),
            trace.clone(),
            *opts,
        );
        self.rt.block_on(fut)
    }

    fn reset(&mut self) -> Result<(), ExecError> {
        if self.endpoint.engine_kind != EngineKind::Simulator {
            return Err(ExecError::Unsupported(
                "reset on a remote endpoint; use per-trace isolation".into(),
            ));
        }
        let url = format!("{}/reset", self.endpoint.base_url);
        let client = self.client.clone();
        self.rt.block_on(async move {
            let resp = client
                .post(url)
                .send()
                .await
                .map_err(|e| ExecError::Unreachable(e.to_string()))?;
            if resp.status().is_success() {
                Ok(())
            } else {
                Err(ExecError::Transport(format!(
                    "reset returned {}",
                    resp.status()
                )))
            }
        })
    }

    fn healthy(&mut self) -> bool {
        let (client, endpoint) = (self.client.clone(), self.endpoint.clone());
        self.rt
            .block_on(async move { Self::health(&client, &endpoint).await.is_some() })
    }

    fn kind(&self) -> EngineKind {
        self.endpoint.engine_kind
    }
}
