//! HTTP front end for the simulator (wall-clock mode).
//!
//! Routes:
//! - `POST /v1/completions`: token-array prompt, streamed (SSE) or unary
//! - `POST /v1/cancel/{id}`
//! - `GET /kv_events?since=N`: NDJSON, one [`KvEvent`] per line
//! - `POST /reset`, `GET /health`
//!
//! A ticker thread advances the core in real time. All access to the core
//! goes through one mutex, so admission is serialized. When the core crashes
//! the listener shuts down and clients see connection loss.

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, watch};

use super::config::SimConfig;
use super::engine::{EngineRequest, SimCore, StepOutput};
use crate::exec::CompletionBody;
use crate::report::{KvEvent, TokenLogprob};
use crate::trace::{token_text, Token, BASE_ADAPTER};

/// One streamed token, as sent in an SSE `data:` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamChunk {
    pub id: String,
    pub choices: Vec<ChunkChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkChoice {
    pub index: u32,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_id: Option<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<Vec<TokenLogprob>>,
}

/// Unary completion response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub id: String,
    pub choices: Vec<UnaryChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnaryChoice {
    pub index: u32,
    pub text: String,
    pub token_ids: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<Vec<Vec<TokenLogprob>>>,
    pub finish_reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthStatus {
    pub status: String,
    pub now_ms: u64,
    pub kv_events: usize,
}

enum Msg {
    Token(ChunkChoice),
    Done,
}

struct Shared {
    core: SimCore,
    epoch: Instant,
    streams: HashMap<String, mpsc::UnboundedSender<Msg>>,
    kv_log: Vec<KvEvent>,
    next_id: u64,
}

impl Shared {
    fn wall_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    fn sync_events(&mut self) {
        let events = self.core.drain_kv_events();
        self.kv_log.extend(events);
    }
}

type AppState = Arc<Mutex<Shared>>;

/// A simulator endpoint running on its own thread.
pub struct SimServer {
    addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    thread: Option<JoinHandle<()>>,
}

impl SimServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(cfg: SimConfig, addr: &str) -> std::io::Result<Self> {
        cfg.validate()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
        let std_listener = std::net::TcpListener::bind(addr)?;
        std_listener.set_nonblocking(true)?;
        let local = std_listener.local_addr()?;
        let (tx, rx) = watch::channel(false);
        let tick_ms = cfg.tick_ms;
        let shared: AppState = Arc::new(Mutex::new(Shared {
            core: SimCore::new(cfg),
            epoch: Instant::now(),
            streams: HashMap::new(),
            kv_log: Vec::new(),
            next_id: 0,
        }));

        let crash_tx = tx.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("tokio runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                let ticker = tokio::spawn(tick_loop(shared.clone(), tick_ms, crash_tx, rx.clone()));
                let app = router(shared);
                let mut stop = rx;
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async move {
                        let _ = stop.wait_for(|v| *v).await;
                    })
                    .await;
                ticker.abort();
            });
        });
        Ok(Self {
            addr: local,
            shutdown: tx,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops (shutdown or engine crash).
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn stop(mut self) {
        let _ = self.shutdown.send(true);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for SimServer {
    fn drop(&mut self) {
        let _ = self.shutdown.send(true);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/completions", post(completions))
        .route("/v1/cancel/{id}", post(cancel))
        .route("/kv_events", get(kv_events))
        .route("/reset", post(reset))
        .route("/health", get(health))
        .with_state(state)
}

async fn tick_loop(
    state: AppState,
    tick_ms: u64,
    crash: watch::Sender<bool>,
    stop: watch::Receiver<bool>,
) {
    // Output of the last step, delivered once wall time reaches its end.
    let mut pending: Option<StepOutput> = None;
    loop {
        if *stop.borrow() {
            return;
        }
        let wait_ms = {
            let mut s = state.lock().expect("sim state");
            let wall = s.wall_ms();
            if s.core.now_ms() > wall {
                s.core.now_ms() - wall
            } else {
                if let Some(out) = pending.take() {
                    deliver(&mut s, out);
                }
                s.core.advance_to(wall);
                if s.core.is_idle() {
                    tick_ms
                } else {
                    let out = s.core.step();
                    if out.crashed {
                        // Abrupt termination: every open stream loses its sender.
                        s.streams.clear();
                        s.sync_events();
                        let _ = crash.send(true);
                        return;
                    }
                    s.sync_events();
                    let wait = out.end_ms.saturating_sub(wall);
                    pending = Some(out);
                    wait
                }
            }
        };
        tokio::time::sleep(Duration::from_millis(wait_ms.max(1))).await;
    }
}

fn deliver(s: &mut Shared, out: StepOutput) {
    for e in out.tokens {
        if let Some(tx) = s.streams.get(&e.request_id) {
            let _ = tx.send(Msg::Token(ChunkChoice {
                index: e.completion,
                text: token_text(e.token),
                token_id: Some(e.token),
                top_logprobs: e.logprobs,
            }));
        }
    }
    for id in out.finished {
        if let Some(tx) = s.streams.remove(&id) {
            let _ = tx.send(Msg::Done);
        }
    }
}

fn error_response(status: StatusCode, message: String) -> Response {
    (
        status,
        Json(serde_json::json!({ "error": { "message": message } })),
    )
        .into_response()
}

/// Cancels the request in the core when the client goes away mid-stream.
struct DisconnectGuard {
    state: AppState,
    id: String,
    done: bool,
}

impl Drop for DisconnectGuard {
    fn drop(&mut self) {
        if self.done {
            return;
        }
        if let Ok(mut s) = self.state.lock() {
            if s.streams.remove(&self.id).is_some() {
                s.core.cancel(&self.id);
                s.sync_events();
            }
        }
    }
}

async fn completions(State(state): State<AppState>, Json(body): Json<CompletionBody>) -> Response {
    let (tx, mut rx) = mpsc::unbounded_channel();
    let id = {
        let mut s = state.lock().expect("sim state");
        let id = if body.request_id.is_empty() {
            s.next_id += 1;
            format!("cmpl-{}", s.next_id)
        } else {
            body.request_id.clone()
        };
        if s.streams.contains_key(&id) || s.core.has_request(&id) {
            return error_response(
                StatusCode::CONFLICT,
                format!("request id '{id}' already in flight"),
            );
        }
        let adapter = body.adapter.clone().or_else(|| {
            (body.model != BASE_ADAPTER && !body.model.is_empty()).then(|| body.model.clone())
        });
        let wall = s.wall_ms();
        let arrival = s.core.now_ms().max(wall);
        let submitted = s.core.submit(EngineRequest {
            id: id.clone(),
            prompt: body.prompt.clone(),
            max_tokens: body.max_tokens,
            temperature: body.temperature,
            seed: body.seed,
            logprobs: body.logprobs,
            n: body.n.max(1),
            adapter,
            arrival_ms: arrival,
        });
        if let Err(e) = submitted {
            return error_response(StatusCode::BAD_REQUEST, e);
        }
        s.streams.insert(id.clone(), tx);
        id
    };

    let guard = DisconnectGuard {
        state: state.clone(),
        id: id.clone(),
        done: false,
    };

    if body.stream {
        let stream = futures::stream::unfold(
            (rx, guard, false),
            |(mut rx, mut guard, finished)| async move {
                if finished {
                    return None;
                }
                match rx.recv().await {
                    Some(Msg::Token(choice)) => {
                        let chunk = StreamChunk {
                            id: guard.id.clone(),
                            choices: vec![choice],
                        };
                        let data = serde_json::to_string(&chunk).expect("chunk encodes");
                        Some((
                            Ok::<_, Infallible>(Event::default().data(data)),
                            (rx, guard, false),
                        ))
                    }
                    Some(Msg::Done) => {
                        guard.done = true;
                        Some((Ok(Event::default().data("[DONE]")), (rx, guard, true)))
                    }
                    // Sender dropped without Done: cancel or crash.
                    None => None,
                }
            },
        );
        return Sse::new(stream).into_response();
    }

    let n = body.n.max(1) as usize;
    let mut tokens: Vec<Vec<Token>> = vec![Vec::new(); n];
    let mut logprobs: Vec<Vec<Vec<TokenLogprob>>> = vec![Vec::new(); n];
    let mut guard = guard;
    loop {
        match rx.recv().await {
            Some(Msg::Token(c)) => {
                let i = c.index as usize;
                tokens[i].push(c.token_id.unwrap_or_default());
                if let Some(lp) = c.top_logprobs {
                    logprobs[i].push(lp);
                }
            }
            Some(Msg::Done) => break,
            None => {
                guard.done = true;
                drop(guard);
                return error_response(StatusCode::SERVICE_UNAVAILABLE, "request aborted".into());
            }
        }
    }
    guard.done = true;
    let choices = tokens
        .into_iter()
        .zip(logprobs)
        .enumerate()
        .map(|(i, (ids, lps))| UnaryChoice {
            index: i as u32,
            text: ids
                .iter()
                .map(|t| token_text(*t))
                .collect::<Vec<_>>()
                .join(" "),
            token_ids: ids,
            top_logprobs: body.logprobs.map(|_| lps),
            finish_reason: "length".into(),
        })
        .collect();
    Json(CompletionResponse { id, choices }).into_response()
}

async fn cancel(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let mut s = state.lock().expect("sim state");
    let known = s.core.cancel(&id);
    s.streams.remove(&id);
    s.sync_events();
    Json(serde_json::json!({ "id": id, "cancelled": known })).into_response()
}

#[derive(Deserialize)]
struct Since {
    #[serde(default)]
    since: usize,
}

async fn kv_events(State(state): State<AppState>, Query(q): Query<Since>) -> Response {
    let mut s = state.lock().expect("sim state");
    s.sync_events();
    let mut body = String::new();
    for ev in s.kv_log.iter().skip(q.since) {
        body.push_str(&serde_json::to_string(ev).expect("event encodes"));
        body.push('\n');
    }
    ([("content-type", "application/x-ndjson")], body).into_response()
}

async fn reset(State(state): State<AppState>) -> Response {
    let mut s = state.lock().expect("sim state");
    s.core.reset();
    s.streams.clear();
    s.kv_log.clear();
    s.epoch = Instant::now();
    Json(serde_json::json!({ "reset": true })).into_response()
}

async fn health(State(state): State<AppState>) -> Response {
    let mut s = state.lock().expect("sim state");
    s.sync_events();
    let status = HealthStatus {
        status: if s.core.is_alive() { "ok" } else { "down" }.into(),
        now_ms: s.core.now_ms().max(s.wall_ms()),
        kv_events: s.kv_log.len(),
    };
    Json(status).into_response()
}
