//! HTTP front end for [`Server`] and a blocking client transport.
//!
//! Routing endpoints:
//!
//! - `POST /v1/route_token`: wire request body, wire response body.
//! - `GET /v1/health`
//! - `GET /v1/config`
//!
//! With a [`Gateway`] attached, the same process also serves the client-side
//! endpoints used by the browser console:
//!
//! - `POST /v1/generate`: runs a whole generation, returns the result.
//! - `POST /v1/generate/stream`: server-sent events, one per token, then `done`.
//! - `GET /v1/results/{session_id}`: a finished result.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event as SseEvent, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{LatencyProfile, LlmTransport, Server, ServerError, ServingConfig, TransportError};
use crate::clock::MonotonicClock;
use crate::engine::Backend;
use crate::metrics::{self, RequestMetrics};
use crate::orchestrator::{GenerationResult, Orchestrator, OrchestratorError};
use crate::types::{GenerationConfig, KvPolicy, Mode, TaggedToken};
use crate::wire::{parse_response, serialize_request, RoutingRequest, RoutingResponse};

/// Type-erased generation loop for the gateway endpoints.
pub trait GenerateService: Send + Sync {
    fn generate(
        &self,
        prompt: &str,
        cfg: &GenerationConfig,
        sink: &mut dyn FnMut(&TaggedToken),
    ) -> Result<GenerationResult, OrchestratorError>;
}

impl<B: Backend, T: LlmTransport> GenerateService for Orchestrator<B, T> {
    fn generate(
        &self,
        prompt: &str,
        cfg: &GenerationConfig,
        sink: &mut dyn FnMut(&TaggedToken),
    ) -> Result<GenerationResult, OrchestratorError> {
        self.stream_generate(prompt, cfg, &MonotonicClock::new(false), sink)
    }
}

/// Client-facing side: a generation loop plus finished results.
pub struct Gateway {
    service: Arc<dyn GenerateService>,
    results: Mutex<HashMap<String, ResultSummary>>,
}

impl Gateway {
    pub fn new(service: Arc<dyn GenerateService>) -> Self {
        Gateway { service, results: Mutex::new(HashMap::new()) }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub server: Arc<Server>,
    pub gateway: Option<Arc<Gateway>>,
}

#[derive(Serialize)]
struct ConfigView<'a> {
    #[serde(flatten)]
    cfg: &'a ServingConfig,
    comm_delay_ms: f64,
    llm_latency_ms: f64,
    reprefill_delay_ms: f64,
    backend: &'static str,
}

fn error_body(status: StatusCode, kind: &str, field: Option<&str>, message: String) -> Response {
    (status, Json(json!({ "error": { "kind": kind, "field": field, "message": message } }))).into_response()
}

fn server_error(e: ServerError) -> Response {
    let status = match &e {
        ServerError::MalformedRequest(_) => StatusCode::BAD_REQUEST,
        ServerError::SessionLimitExceeded { .. } => StatusCode::TOO_MANY_REQUESTS,
        ServerError::BackendFailure(_) | ServerError::InvalidConfig(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    let field = match &e {
        ServerError::MalformedRequest(w) => w.field().map(str::to_string),
        _ => None,
    };
    error_body(status, e.kind(), field.as_deref(), e.to_string())
}

async fn route_token(State(state): State<AppState>, body: Bytes) -> Response {
    let server = state.server.clone();
    match tokio::task::spawn_blocking(move || server.serve_bytes(&body)).await {
        Ok(Ok(bytes)) => ([(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Ok(Err(e)) => server_error(e),
        Err(e) => error_body(StatusCode::INTERNAL_SERVER_ERROR, "internal", None, e.to_string()),
    }
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "sessions": state.server.session_count() }))
}

async fn config(State(state): State<AppState>) -> Response {
    let cfg = state.server.config();
    Json(ConfigView {
        cfg,
        comm_delay_ms: cfg.comm_delay_s * 1e3,
        llm_latency_ms: cfg.llm_latency_s * 1e3,
        reprefill_delay_ms: cfg.reprefill_delay_s_per_call * 1e3,
        backend: state.server.backend().kind(),
    })
    .into_response()
}

/// Body of the generate endpoints. Omitted fields take their defaults.
#[derive(Debug, Clone, Deserialize)]
pub struct GenerateBody {
    pub prompt: String,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub max_tokens: Option<usize>,
    #[serde(default)]
    pub kv_policy: Option<KvPolicy>,
}

impl GenerateBody {
    fn config(&self, stream: bool) -> GenerationConfig {
        let d = GenerationConfig::default();
        GenerationConfig {
            mode: self.mode.unwrap_or(d.mode),
            threshold: self.threshold.unwrap_or(d.threshold),
            max_tokens: self.max_tokens.unwrap_or(d.max_tokens),
            kv_policy: self.kv_policy.unwrap_or(d.kv_policy),
            stream,
            ..d
        }
    }
}

/// What the console needs after a generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub session_id: String,
    pub text: String,
    pub tokens: Vec<TaggedToken>,
    pub generated: usize,
    pub routed: usize,
    pub metrics: Option<RequestMetrics>,
    pub error: Option<String>,
}

impl From<&GenerationResult> for ResultSummary {
    fn from(r: &GenerationResult) -> Self {
        ResultSummary {
            session_id: r.session_id.clone(),
            text: r.text.clone(),
            tokens: r.tokens.clone(),
            generated: r.tokens.len(),
            routed: r.routed_tokens(),
            metrics: metrics::compute(&r.events).ok(),
            error: r.error.clone(),
        }
    }
}

fn parse_body(body: &[u8]) -> Result<GenerateBody, Response> {
    serde_json::from_slice(body).map_err(|e| error_body(StatusCode::BAD_REQUEST, "malformed_request", None, e.to_string()))
}

fn gateway_of(state: &AppState) -> Result<Arc<Gateway>, Response> {
    state
        .gateway
        .clone()
        .ok_or_else(|| error_body(StatusCode::NOT_FOUND, "no_gateway", None, "this server has no generation gateway".into()))
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Response {
    let (gw, body) = match gateway_of(&state).and_then(|g| Ok((g, parse_body(&body)?))) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let cfg = body.config(false);
    let g = gw.clone();
    let res = tokio::task::spawn_blocking(move || g.service.generate(&body.prompt, &cfg, &mut |_| {})).await;
    match res {
        Ok(Ok(result)) => {
            let summary = ResultSummary::from(&result);
            gw.results.lock().unwrap().insert(summary.session_id.clone(), summary.clone());
            Json(summary).into_response()
        }
        Ok(Err(e)) => error_body(StatusCode::BAD_REQUEST, "invalid_generation", None, e.to_string()),
        Err(e) => error_body(StatusCode::INTERNAL_SERVER_ERROR, "internal", None, e.to_string()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StreamMessage {
    Token { seq: u64, index: usize, text: String, source: crate::types::Route, confidence: Option<f64> },
    Done { seq: u64, summary: Option<ResultSummary>, error: Option<String> },
}

async fn generate_stream(State(state): State<AppState>, body: Bytes) -> Response {
    let (gw, body) = match gateway_of(&state).and_then(|g| Ok((g, parse_body(&body)?))) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let cfg = body.config(true);
    let (tx, rx) = tokio::sync::mpsc::unbounded_channel::<StreamMessage>();
    tokio::task::spawn_blocking(move || {
        let mut seq = 0u64;
        let mut index = 0usize;
        let result = gw.service.generate(&body.prompt, &cfg, &mut |t| {
            let _ = tx.send(StreamMessage::Token {
                seq,
                index,
                text: t.text.clone(),
                source: t.source,
                confidence: t.confidence,
            });
            seq += 1;
            index += 1;
        });
        let done = match result {
            Ok(r) => {
                let summary = ResultSummary::from(&r);
                gw.results.lock().unwrap().insert(summary.session_id.clone(), summary.clone());
                StreamMessage::Done { seq, error: summary.error.clone(), summary: Some(summary) }
            }
            Err(e) => StreamMessage::Done { seq, summary: None, error: Some(e.to_string()) },
        };
        let _ = tx.send(done);
    });
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        let msg = rx.recv().await?;
        let name = match msg {
            StreamMessage::Token { .. } => "token",
            StreamMessage::Done { .. } => "done",
        };
        let event = SseEvent::default().event(name).json_data(&msg).expect("stream messages serialize");
        Some((Ok::<_, std::convert::Infallible>(event), rx))
    });
    Sse::new(stream).into_response()
}

async fn result(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let gw = match gateway_of(&state) {
        Ok(g) => g,
        Err(r) => return r,
    };
    let found = gw.results.lock().unwrap().get(&id).cloned();
    match found {
        Some(s) => Json(s).into_response(),
        None => error_body(StatusCode::NOT_FOUND, "unknown_session", None, format!("no result for {id}")),
    }
}

/// Builds the application. `console_dir` is served as static files.
pub fn app(state: AppState, console_dir: Option<PathBuf>) -> Router {
    let mut router = Router::new()
        .route("/v1/route_token", post(route_token))
        .route("/v1/health", get(health))
        .route("/v1/config", get(config))
        .route("/v1/generate", post(generate))
        .route("/v1/generate/stream", post(generate_stream))
        .route("/v1/results/{id}", get(result))
        .with_state(state);
    if let Some(dir) = console_dir {
        router = router.fallback_service(tower_http::services::ServeDir::new(dir));
    }
    router
}

/// A server running on a background thread with its own runtime.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Binds `addr` and serves `router` until the handle is stopped or dropped.
pub fn spawn(router: Router, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            let _ = axum::serve(listener, router)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle { addr, shutdown: Some(tx), thread: Some(thread) })
}

/// Serves until the process is interrupted.
pub fn run_blocking(router: Router, addr: SocketAddr) -> std::io::Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router).await
    })
}

/// Blocking client for a remote routing endpoint.
pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
    profile: LatencyProfile,
}

impl HttpTransport {
    /// Connects and reads the server's latency profile from `/v1/config`.
    pub fn connect(base: &str) -> Result<Self, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        let base = base.trim_end_matches('/').to_string();
        let mut resp = agent
            .get(&format!("{base}/v1/config"))
            .call()
            .map_err(|e| TransportError::Unreachable(e.to_string()))?;
        let bytes = resp.body_mut().read_to_vec().map_err(|e| TransportError::Unreachable(e.to_string()))?;
        let cfg: ServingConfig = serde_json::from_slice(&bytes)
            .map_err(|e| TransportError::Unreachable(format!("bad /v1/config reply: {e}")))?;
        Ok(HttpTransport { base, agent, profile: (&cfg).into() })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }
}

impl LlmTransport for HttpTransport {
    fn route(&self, request: &RoutingRequest) -> Result<RoutingResponse, TransportError> {
        let body = serialize_request(request)?;
        let mut resp = self
            .agent
            .post(&format!("{}/v1/route_token", self.base))
            .header("content-type", "application/json")
            .send(&body[..])
            .map_err(|e| TransportError::Unreachable(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.body_mut().read_to_vec().map_err(|e| TransportError::Unreachable(e.to_string()))?;
        if status.is_success() {
            return Ok(parse_response(&bytes)?);
        }
        let detail: serde_json::Value = serde_json::from_slice(&bytes).unwrap_or_default();
        let kind = detail["error"]["kind"].as_str().unwrap_or("http_error").to_string();
        let message = detail["error"]["message"].as_str().map(str::to_string).unwrap_or_else(|| status.to_string());
        Err(TransportError::Rejected { kind, message })
    }

    fn latency_profile(&self) -> LatencyProfile {
        self.profile
    }
}
