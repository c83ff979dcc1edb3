//! Large-model serving side.
//!
//! [`Server`] answers routing requests: it decodes the request's context,
//! asks the backend for `llm_burst` tokens, adds the configured latency and
//! returns the tokens together with the extended decision history. Requests
//! are self-contained, so per-session state is only an optimisation (a
//! server-side KV cache) plus the idempotency record. Requests of one session
//! are serialized; different sessions run concurrently.

#[cfg(feature = "http")]
pub mod http;

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, VecDeque};
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{greedy_next, Backend, ByteTokenizer, EngineError, KvCache, TinyTransformer, EOS};
use crate::types::{Route, TokenId};
use crate::wire::{
    parse_request, parse_response, serialize_request, serialize_response, DecisionRecord, ResponseToken,
    RoutingRequest, RoutingResponse, WireError,
};

/// How much idempotency history each session keeps.
const STORED_RESPONSES: usize = 256;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("session limit of {max} reached")]
    SessionLimitExceeded { max: usize },
    #[error("backend failure: {0}")]
    BackendFailure(String),
    #[error("malformed request: {0}")]
    MalformedRequest(#[from] WireError),
    #[error("invalid serving config: {0}")]
    InvalidConfig(String),
}

impl ServerError {
    pub fn kind(&self) -> &'static str {
        match self {
            ServerError::SessionLimitExceeded { .. } => "session_limit_exceeded",
            ServerError::BackendFailure(_) => "backend_failure",
            ServerError::MalformedRequest(_) => "malformed_request",
            ServerError::InvalidConfig(_) => "invalid_config",
        }
    }
}

impl From<EngineError> for ServerError {
    fn from(e: EngineError) -> Self {
        ServerError::BackendFailure(e.to_string())
    }
}

/// Where `llm_time_seconds` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    /// Backend compute is timed with the host's monotonic clock.
    #[default]
    Measured,
    /// Backend compute counts as zero; only injected latency is reported.
    /// Runs become bit-for-bit reproducible.
    Modeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServingConfig {
    pub llm_burst: usize,
    pub comm_delay_s: f64,
    pub llm_latency_s: f64,
    pub reprefill_delay_s_per_call: f64,
    pub max_sessions: usize,
    /// Sleep for the injected latency instead of only reporting it.
    pub real_sleeps: bool,
    pub timing: Timing,
}

impl Default for ServingConfig {
    fn default() -> Self {
        ServingConfig {
            llm_burst: 1,
            comm_delay_s: 0.170,
            llm_latency_s: 0.9,
            reprefill_delay_s_per_call: 0.004,
            max_sessions: 1024,
            real_sleeps: false,
            timing: Timing::Measured,
        }
    }
}

impl ServingConfig {
    /// No injected latency at all.
    pub fn instant() -> Self {
        ServingConfig { comm_delay_s: 0.0, llm_latency_s: 0.0, reprefill_delay_s_per_call: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        if self.llm_burst == 0 {
            return Err(ServerError::InvalidConfig("llm_burst must be at least 1".into()));
        }
        for (name, v) in [
            ("comm_delay_s", self.comm_delay_s),
            ("llm_latency_s", self.llm_latency_s),
            ("reprefill_delay_s_per_call", self.reprefill_delay_s_per_call),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ServerError::InvalidConfig(format!("{name} must be a finite non-negative number")));
            }
        }
        if self.max_sessions == 0 {
            return Err(ServerError::InvalidConfig("max_sessions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Answer table keyed by prompt. The continuation at a context is the answer
/// byte at the context's offset past the longest matching prompt, so the
/// oracle stays correct even after the small model has written wrong bytes.
#[derive(Debug, Clone, Default)]
pub struct ScriptedOracle {
    entries: Vec<(Vec<u8>, Vec<u8>)>,
}

impl ScriptedOracle {
    pub fn new<P: Into<String>, A: Into<String>>(entries: impl IntoIterator<Item = (P, A)>) -> Self {
        let mut entries: Vec<(Vec<u8>, Vec<u8>)> =
            entries.into_iter().map(|(p, a)| (p.into().into_bytes(), a.into().into_bytes())).collect();
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        ScriptedOracle { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Next `n` tokens after `context` (raw bytes, no BOS). Stops after EOS.
    pub fn continuation(&self, context: &[u8], n: usize) -> Option<Vec<TokenId>> {
        let (prompt, answer) = self.entries.iter().find(|(p, _)| context.starts_with(p))?;
        let pos = context.len() - prompt.len();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            match answer.get(pos + k) {
                Some(&b) => out.push(TokenId(b as u32)),
                None => {
                    out.push(EOS);
                    break;
                }
            }
        }
        Some(out)
    }
}

pub enum LlmBackend {
    ReferenceEngine { engine: TinyTransformer, kv_cache: bool },
    ScriptedOracle(ScriptedOracle),
}

impl LlmBackend {
    pub fn kind(&self) -> &'static str {
        match self {
            LlmBackend::ReferenceEngine { .. } => "reference_engine",
            LlmBackend::ScriptedOracle(_) => "scripted_oracle",
        }
    }
}

struct ServerKv {
    cache: KvCache,
    covered: Vec<TokenId>,
    logits: Vec<f64>,
}

struct SessionState {
    context: Vec<TokenId>,
    kv: Option<ServerKv>,
    last_request_id: Option<String>,
    history: Vec<DecisionRecord>,
    /// Request id -> (fingerprint of the canonical request, response bytes).
    responses: HashMap<String, (u64, Vec<u8>)>,
    response_order: VecDeque<String>,
    last_used: f64,
}

impl SessionState {
    fn new(now: f64) -> Self {
        SessionState {
            context: Vec::new(),
            kv: None,
            last_request_id: None,
            history: Vec::new(),
            responses: HashMap::new(),
            response_order: VecDeque::new(),
            last_used: now,
        }
    }

    fn remember(&mut self, request_id: &str, fingerprint: u64, bytes: Vec<u8>) {
        if self.responses.contains_key(request_id) {
            self.response_order.retain(|id| id != request_id);
        } else if self.response_order.len() == STORED_RESPONSES {
            if let Some(old) = self.response_order.pop_front() {
                self.responses.remove(&old);
            }
        }
        self.response_order.push_back(request_id.to_string());
        self.responses.insert(request_id.to_string(), (fingerprint, bytes));
    }
}

type NowFn = Box<dyn Fn() -> f64 + Send + Sync>;

pub struct Server {
    backend: LlmBackend,
    cfg: ServingConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionState>>>>,
    now: NowFn,
    backend_runs: AtomicU64,
}

impl Server {
    /// Session idle times follow the host clock under [`Timing::Measured`]
    /// and stand still under [`Timing::Modeled`].
    pub fn new(backend: LlmBackend, cfg: ServingConfig) -> Result<Self, ServerError> {
        let now: NowFn = match cfg.timing {
            Timing::Measured => {
                let origin = std::time::Instant::now();
                Box::new(move || origin.elapsed().as_secs_f64())
            }
            Timing::Modeled => Box::new(|| 0.0),
        };
        Self::with_clock(backend, cfg, now)
    }

    pub fn with_clock(
        backend: LlmBackend,
        cfg: ServingConfig,
        now: impl Fn() -> f64 + Send + Sync + 'static,
    ) -> Result<Self, ServerError> {
        cfg.validate()?;
        Ok(Server { backend, cfg, sessions: Mutex::new(HashMap::new()), now: Box::new(now), backend_runs: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &ServingConfig {
        &self.cfg
    }

    pub fn backend(&self) -> &LlmBackend {
        &self.backend
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// How many times the backend actually generated (replays excluded).
    pub fn backend_runs(&self) -> u64 {
        self.backend_runs.load(Ordering::SeqCst)
    }

    /// Accumulated context of a session: request context plus served tokens.
    pub fn session_context(&self, session_id: &str) -> Option<Vec<TokenId>> {
        let session = self.sessions.lock().unwrap().get(session_id).cloned()?;
        let state = session.lock().unwrap();
        Some(state.context.clone())
    }

    pub fn session_history(&self, session_id: &str) -> Option<Vec<DecisionRecord>> {
        let session = self.sessions.lock().unwrap().get(session_id).cloned()?;
        let state = session.lock().unwrap();
        Some(state.history.clone())
    }

    pub fn serve(&self, request: &RoutingRequest) -> Result<RoutingResponse, ServerError> {
        let bytes = self.serve_request(request)?;
        Ok(parse_response(&bytes)?)
    }

    /// Parses a wire body and returns the canonical response body.
    pub fn serve_bytes(&self, body: &[u8]) -> Result<Vec<u8>, ServerError> {
        let request = parse_request(body)?;
        self.serve_request(&request)
    }

    /// Drops sessions idle for longer than `max_idle_s`.
    pub fn session_gc(&self, max_idle_s: f64) -> usize {
        let now = (self.now)();
        let mut sessions = self.sessions.lock().unwrap();
        let before = sessions.len();
        sessions.retain(|_, s| match s.try_lock() {
            Ok(state) => now - state.last_used <= max_idle_s,
            // Busy sessions are active by definition.
            Err(_) => true,
        });
        before - sessions.len()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<SessionState>>, ServerError> {
        let mut sessions = self.sessions.lock().unwrap();
        if let Some(s) = sessions.get(id) {
            return Ok(s.clone());
        }
        if sessions.len() >= self.cfg.max_sessions {
            return Err(ServerError::SessionLimitExceeded { max: self.cfg.max_sessions });
        }
        let s = Arc::new(Mutex::new(SessionState::new((self.now)())));
        sessions.insert(id.to_string(), s.clone());
        Ok(s)
    }

    fn serve_request(&self, request: &RoutingRequest) -> Result<Vec<u8>, ServerError> {
        request.validate()?;
        let session = self.session(&request.meta_data.session_id)?;
        let mut state = session.lock().unwrap();
        state.last_used = (self.now)();
        let fingerprint = {
            let mut h = DefaultHasher::new();
            serialize_request(request)?.hash(&mut h);
            h.finish()
        };
        match state.responses.get(&request.meta_data.request_id) {
            Some((fp, stored)) if *fp == fingerprint => return Ok(stored.clone()),
            Some(_) => log::warn!(
                "session {}: request id {} reused for a different request, serving it fresh",
                request.meta_data.session_id,
                request.meta_data.request_id
            ),
            None => {}
        }

        let tok = ByteTokenizer;
        let context = tok.encode_with_bos(&request.context);
        if !state.context.is_empty() && !context.starts_with(&state.context) {
            log::warn!(
                "session {}: request context diverges from session state, using the request",
                request.meta_data.session_id
            );
        }

        let started = match self.cfg.timing {
            Timing::Measured => Some(std::time::Instant::now()),
            Timing::Modeled => None,
        };
        let tokens = self.generate(&mut state, &context)?;
        let compute = started.map_or(0.0, |s| s.elapsed().as_secs_f64());
        self.backend_runs.fetch_add(1, Ordering::SeqCst);
        if self.cfg.real_sleeps && self.cfg.llm_latency_s > 0.0 {
            std::thread::sleep(std::time::Duration::from_secs_f64(self.cfg.llm_latency_s));
        }

        let burst_text = tok.decode(&tokens);
        let mut history = request.history.clone();
        history.previous_decisions.push(DecisionRecord { token: burst_text, route: Route::Llm });
        let response = RoutingResponse {
            tokens: tokens
                .iter()
                .map(|&t| ResponseToken { text: if tok.is_special(t) { String::new() } else { tok.token_text(t) }, token: t })
                .collect(),
            llm_time_seconds: compute + self.cfg.llm_latency_s,
            request_id: request.meta_data.request_id.clone(),
            updated_history: history,
        };
        let bytes = serialize_response(&response)?;

        let mut new_context = context;
        new_context.extend(tokens.iter().copied().filter(|&t| t != EOS));
        state.context = new_context;
        state.history = response.updated_history.previous_decisions.clone();
        state.last_request_id = Some(request.meta_data.request_id.clone());
        state.remember(&request.meta_data.request_id, fingerprint, bytes.clone());
        Ok(bytes)
    }

    fn generate(&self, state: &mut SessionState, context: &[TokenId]) -> Result<Vec<TokenId>, ServerError> {
        let burst = self.cfg.llm_burst;
        match &self.backend {
            LlmBackend::ScriptedOracle(oracle) => {
                let bytes = ByteTokenizer.decode_bytes(context);
                oracle
                    .continuation(&bytes, burst)
                    .ok_or_else(|| ServerError::BackendFailure("no scripted continuation for this context".into()))
            }
            LlmBackend::ReferenceEngine { engine, kv_cache } => {
                let reusable = state
                    .kv
                    .take()
                    .filter(|kv| *kv_cache && !kv.covered.is_empty() && context.starts_with(&kv.covered));
                let mut kv = match reusable {
                    Some(mut kv) => {
                        for &t in &context[kv.covered.len()..] {
                            kv.logits = engine.decode_step(&mut kv.cache, t)?.logits;
                            kv.covered.push(t);
                        }
                        kv
                    }
                    None => {
                        let (cache, out) = engine.prefill(context)?;
                        ServerKv { cache, covered: context.to_vec(), logits: out.logits }
                    }
                };
                let mut out = Vec::with_capacity(burst);
                loop {
                    let t = greedy_next(&kv.logits);
                    out.push(t);
                    if t == EOS || out.len() == burst {
                        break;
                    }
                    kv.logits = engine.decode_step(&mut kv.cache, t)?.logits;
                    kv.covered.push(t);
                }
                if *kv_cache {
                    state.kv = Some(kv);
                }
                Ok(out)
            }
        }
    }
}

/// Latency the client should add around each call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub comm_delay_s: f64,
    pub reprefill_delay_s: f64,
}

impl From<&ServingConfig> for LatencyProfile {
    fn from(cfg: &ServingConfig) -> Self {
        LatencyProfile { comm_delay_s: cfg.comm_delay_s, reprefill_delay_s: cfg.reprefill_delay_s_per_call }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("server unreachable: {0}")]
    Unreachable(String),
    #[error("server rejected the request ({kind}): {message}")]
    Rejected { kind: String, message: String },
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Client-side view of the large-model endpoint.
pub trait LlmTransport: Send + Sync {
    fn route(&self, request: &RoutingRequest) -> Result<RoutingResponse, TransportError>;
    fn latency_profile(&self) -> LatencyProfile;
}

impl<T: LlmTransport + ?Sized> LlmTransport for &T {
    fn route(&self, request: &RoutingRequest) -> Result<RoutingResponse, TransportError> {
        (**self).route(request)
    }
    fn latency_profile(&self) -> LatencyProfile {
        (**self).latency_profile()
    }
}

impl<T: LlmTransport + ?Sized> LlmTransport for Arc<T> {
    fn route(&self, request: &RoutingRequest) -> Result<RoutingResponse, TransportError> {
        (**self).route(request)
    }
    fn latency_profile(&self) -> LatencyProfile {
        (**self).latency_profile()
    }
}

/// Calls a [`Server`] in the same process, still going through the wire
/// encoding in both directions.
#[derive(Clone)]
pub struct InProcessTransport {
    server: Arc<Server>,
}

impl InProcessTransport {
    pub fn new(server: Arc<Server>) -> Self {
        InProcessTransport { server }
    }

    pub fn server(&self) -> &Arc<Server> {
        &self.server
    }
}

impl LlmTransport for InProcessTransport {
    fn route(&self, request: &RoutingRequest) -> Result<RoutingResponse, TransportError> {
        let body = serialize_request(request)?;
        let reply = self
            .server
            .serve_bytes(&body)
            .map_err(|e| TransportError::Rejected { kind: e.kind().to_string(), message: e.to_string() })?;
        Ok(parse_response(&reply)?)
    }

    fn latency_profile(&self) -> LatencyProfile {
        self.server.config().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ModelConfig, ModelWeights};
    use crate::wire::{History, MetaData, SlmState};

    fn request(context: &str, session: &str, req: &str) -> RoutingRequest {
        RoutingRequest {
            context: context.into(),
            current_token: "x".into(),
            token_index: 0,
            routing_threshold: 0.7,
            slm_state: SlmState::default(),
            history: History::default(),
            meta_data: MetaData { session_id: session.into(), request_id: req.into() },
        }
    }

    fn engine(seed: u64) -> TinyTransformer {
        TinyTransformer::new(ModelWeights::random(ModelConfig::reference(seed)).unwrap())
    }

    #[test]
    fn oracle_continues_by_position() {
        let o = ScriptedOracle::new([("Q: ", "ABC"), ("Q: long ", "Z")]);
        assert_eq!(o.continuation(b"Q: ", 2), Some(vec![TokenId(65), TokenId(66)]));
        assert_eq!(o.continuation(b"Q: XY", 5), Some(vec![TokenId(67), EOS]));
        assert_eq!(o.continuation(b"Q: long ", 1), Some(vec![TokenId(90)]));
        assert_eq!(o.continuation(b"nope", 1), None);
    }

    #[test]
    fn burst_contract_and_history() {
        let server = Server::new(
            LlmBackend::ScriptedOracle(ScriptedOracle::new([("Q: ", "ABCDEF")])),
            ServingConfig { llm_burst: 3, ..ServingConfig::default() },
        )
        .unwrap();
        let r = server.serve(&request("Q: ", "s", "r1")).unwrap();
        assert_eq!(r.tokens.len(), 3);
        assert_eq!(r.updated_history.previous_decisions, vec![DecisionRecord { token: "ABC".into(), route: Route::Llm }]);
        assert!(r.llm_time_seconds >= 0.9);
    }

    #[test]
    fn reference_engine_matches_local_greedy() {
        let server = Server::new(
            LlmBackend::ReferenceEngine { engine: engine(7), kv_cache: false },
            ServingConfig::instant(),
        )
        .unwrap();
        let local = engine(7);
        let ctx = "The mitochondria is the powerhouse of the";
        let (_, out) = local.prefill(&ByteTokenizer.encode_with_bos(ctx)).unwrap();
        let r = server.serve(&request(ctx, "s", "r")).unwrap();
        assert_eq!(r.tokens[0].token, greedy_next(&out.logits));
    }

    #[test]
    fn warm_cache_matches_cold_server() {
        let warm = Server::new(LlmBackend::ReferenceEngine { engine: engine(3), kv_cache: true }, ServingConfig::instant()).unwrap();
        let cold = Server::new(LlmBackend::ReferenceEngine { engine: engine(3), kv_cache: false }, ServingConfig::instant()).unwrap();
        let mut ctx = String::from("Once upon");
        for i in 0..6 {
            let a = warm.serve(&request(&ctx, "s", &format!("r{i}"))).unwrap();
            let b = cold.serve(&request(&ctx, "s", &format!("r{i}"))).unwrap();
            assert_eq!(a.tokens, b.tokens);
            ctx.push_str(&a.tokens[0].text);
            ctx.push('q');
        }
    }

    #[test]
    fn replay_is_byte_identical_and_skips_backend() {
        let server = Server::new(LlmBackend::ScriptedOracle(ScriptedOracle::new([("Q", "AB")])), ServingConfig::default()).unwrap();
        let body = serialize_request(&request("Q", "s", "r")).unwrap();
        let a = server.serve_bytes(&body).unwrap();
        let b = server.serve_bytes(&body).unwrap();
        assert_eq!(a, b);
        assert_eq!(server.backend_runs(), 1);
    }

    #[test]
    fn reused_request_id_with_new_content_is_served_fresh() {
        let oracle = ScriptedOracle::new([("P1", "X"), ("P2", "Y")]);
        let server = Server::new(LlmBackend::ScriptedOracle(oracle), ServingConfig::default()).unwrap();
        assert_eq!(server.serve(&request("P1", "s", "r")).unwrap().tokens[0].text, "X");
        assert_eq!(server.serve(&request("P2", "s", "r")).unwrap().tokens[0].text, "Y");
        assert_eq!(server.backend_runs(), 2);
        // The newer answer is now the one replayed.
        assert_eq!(server.serve(&request("P2", "s", "r")).unwrap().tokens[0].text, "Y");
        assert_eq!(server.backend_runs(), 2);
    }

    #[test]
    fn session_limit_and_gc() {
        let t = Arc::new(Mutex::new(0.0));
        let clock = t.clone();
        let server = Server::with_clock(
            LlmBackend::ScriptedOracle(ScriptedOracle::new([("", "A")])),
            ServingConfig { max_sessions: 2, ..ServingConfig::instant() },
            move || *clock.lock().unwrap(),
        )
        .unwrap();
        assert_eq!(server.session_gc(10.0), 0);
        server.serve(&request("", "a", "1")).unwrap();
        *t.lock().unwrap() = 100.0;
        server.serve(&request("", "b", "1")).unwrap();
        assert!(matches!(server.serve(&request("", "c", "1")), Err(ServerError::SessionLimitExceeded { max: 2 })));
        assert_eq!(server.session_gc(10.0), 1);
        assert!(server.session_context("a").is_none() && server.session_context("b").is_some());
        server.serve(&request("", "c", "1")).unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            ServingConfig { llm_burst: 0, ..ServingConfig::default() },
            ServingConfig { comm_delay_s: -1.0, ..ServingConfig::default() },
            ServingConfig { llm_latency_s: f64::NAN, ..ServingConfig::default() },
        ] {
            assert!(Server::new(LlmBackend::ScriptedOracle(ScriptedOracle::default()), cfg).is_err());
        }
    }

    #[test]
    fn unscripted_context_is_a_backend_failure() {
        let server = Server::new(LlmBackend::ScriptedOracle(ScriptedOracle::new([("Q", "A")])), ServingConfig::default()).unwrap();
        assert!(matches!(server.serve(&request("other", "s", "r")), Err(ServerError::BackendFailure(_))));
    }
}
