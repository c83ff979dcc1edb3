//! Collaborative decoding loop.
//!
//! The small model proposes every token. In joint mode the router scores the
//! small model's hidden state first; when the confidence falls below the
//! threshold the position is handed to the large model through an
//! [`LlmTransport`], and the tokens that come back are fed into the small
//! model's cache (or the cache is rebuilt from scratch, depending on the
//! [`KvPolicy`]). Every step is written to a [`SessionRecord`], which is all
//! [`crate::metrics`] needs.

use std::collections::hash_map::RandomState;
use std::hash::{BuildHasher, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Work};
use crate::engine::{greedy_next, sample_with_temperature, Backend, ByteTokenizer, EngineError, IncrementalDecoder, StepOutput, EOS};
use crate::router::{decide, DeferralPolicy, RouterError, RouterModel};
use crate::server::{LlmTransport, TransportError};
use crate::types::{ConfigError, GenerationConfig, HiddenState, KvPolicy, Mode, Route, Sampling, TaggedToken, TokenId};
use crate::wire::{DecisionRecord, History, MetaData, RoutingRequest, SlmState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    PrefillStart { tokens: usize },
    PrefillEnd,
    SlmStepStart { position: usize },
    SlmStepEnd { position: usize },
    RouteDecision { position: usize, confidence: f64, threshold: f64, route: Route },
    LlmCallStart { position: usize, request_id: String },
    LlmCallEnd { position: usize, tokens: usize, llm_time_seconds: f64, ok: bool },
    RePrefillStart { tokens: usize },
    RePrefillEnd,
    CacheExtendStart { tokens: usize },
    CacheExtendEnd,
    Emit { position: usize, source: Route, token: TokenId },
    Fallback { position: usize, reason: String },
    Done { error: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Ordered event log of one generation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub events: Vec<Event>,
}

impl SessionRecord {
    pub fn push(&mut self, t: f64, kind: EventKind) {
        self.events.push(Event { t, kind });
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, RecordError> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(line).map_err(|e| RecordError::Parse { line: i + 1, message: e.to_string() })?;
            events.push(e);
        }
        Ok(SessionRecord { events })
    }

    pub fn count(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.events.iter().filter(|e| pred(&e.kind)).count()
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("router: {0}")]
    Router(#[from] RouterError),
    #[error("server unreachable after retry: {0}")]
    ServerUnreachable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub session_id: String,
    pub tokens: Vec<TaggedToken>,
    pub text: String,
    pub events: SessionRecord,
    pub config: GenerationConfig,
    /// Set when generation stopped on an error; the result is then partial.
    pub error: Option<String>,
    /// Small-model logits used to choose each position, when captured.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub logits: Option<Vec<Vec<f64>>>,
}

impl GenerationResult {
    pub fn routed_tokens(&self) -> usize {
        self.tokens.iter().filter(|t| t.source == Route::Llm).count()
    }

    pub fn token_ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|t| t.token).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    /// Fixed session id; otherwise a fresh one per generation.
    pub session_id: Option<String>,
    pub capture_logits: bool,
    /// Accept the small model's token when the server stays unreachable,
    /// instead of stopping.
    pub fallback_on_unreachable: bool,
}

/// Fields of a routing request that the loop tracks.
pub struct RequestState<'a> {
    pub transcript: &'a str,
    pub candidate: &'a str,
    pub token_index: usize,
    pub threshold: f64,
    pub hidden: Option<&'a HiddenState>,
    pub history: &'a [DecisionRecord],
    pub session_id: &'a str,
}

pub fn request_id(session_id: &str, token_index: usize) -> String {
    format!("{session_id}-t{token_index}")
}

pub fn build_routing_request(state: &RequestState<'_>) -> RoutingRequest {
    RoutingRequest {
        context: state.transcript.to_string(),
        current_token: state.candidate.to_string(),
        token_index: state.token_index as u64,
        routing_threshold: state.threshold,
        slm_state: SlmState { hidden_states: state.hidden.map(|h| h.as_slice().to_vec()), attention_states: None },
        history: History { previous_decisions: state.history.to_vec() },
        meta_data: MetaData { session_id: state.session_id.to_string(), request_id: request_id(state.session_id, state.token_index) },
    }
}

static NEXT_SESSION: AtomicU64 = AtomicU64::new(0);

fn fresh_session_id() -> String {
    let salt = RandomState::new().build_hasher().finish();
    format!("s{:08x}-{}", salt as u32, NEXT_SESSION.fetch_add(1, Ordering::Relaxed))
}

pub struct Orchestrator<B, T> {
    slm: B,
    router: RouterModel,
    transport: T,
    options: GenerateOptions,
}

impl<B: Backend, T: LlmTransport> Orchestrator<B, T> {
    pub fn new(slm: B, router: RouterModel, transport: T) -> Self {
        Orchestrator { slm, router, transport, options: GenerateOptions { fallback_on_unreachable: true, ..Default::default() } }
    }

    pub fn with_options(mut self, options: GenerateOptions) -> Self {
        self.options = options;
        self
    }

    pub fn options(&self) -> &GenerateOptions {
        &self.options
    }

    pub fn slm(&self) -> &B {
        &self.slm
    }

    pub fn router(&self) -> &RouterModel {
        &self.router
    }

    pub fn generate(&self, prompt: &str, cfg: &GenerationConfig, clock: &dyn Clock) -> Result<GenerationResult, OrchestratorError> {
        self.stream_generate(prompt, cfg, clock, &mut |_| {})
    }

    /// Like [`Self::generate`], handing each token to `sink` as it is produced.
    /// Validation errors are returned; errors during decoding end the stream
    /// and are reported in the result's `error` and final `Done` event.
    pub fn stream_generate(
        &self,
        prompt: &str,
        cfg: &GenerationConfig,
        clock: &dyn Clock,
        sink: &mut dyn FnMut(&TaggedToken),
    ) -> Result<GenerationResult, OrchestratorError> {
        let cfg = cfg.validate()?;
        if prompt.is_empty() {
            return Err(OrchestratorError::EmptyPrompt);
        }
        let session_id = self.options.session_id.clone().unwrap_or_else(fresh_session_id);
        let mut run = Run {
            orch: self,
            cfg,
            clock,
            origin: clock.now(),
            session_id,
            context: ByteTokenizer.encode_with_bos(prompt),
            record: SessionRecord::default(),
            tokens: Vec::new(),
            text: String::new(),
            decoder: IncrementalDecoder::new(),
            history: Vec::new(),
            logits: self.options.capture_logits.then(Vec::new),
            rng: match cfg.sampling {
                Sampling::Greedy => None,
                Sampling::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            },
        };
        let error = run.decode(sink).err();
        run.text.push_str(&run.decoder.finish());
        let t = run.clock.now();
        run.record.push(t, EventKind::Done { error: error.as_ref().map(|e| e.to_string()) });
        Ok(GenerationResult {
            session_id: run.session_id,
            tokens: run.tokens,
            text: run.text,
            events: run.record,
            config: cfg,
            error: error.map(|e| e.to_string()),
            logits: run.logits,
        })
    }
}

struct Run<'a, B: Backend, T> {
    orch: &'a Orchestrator<B, T>,
    cfg: GenerationConfig,
    clock: &'a dyn Clock,
    origin: f64,
    session_id: String,
    context: Vec<TokenId>,
    record: SessionRecord,
    tokens: Vec<TaggedToken>,
    text: String,
    decoder: IncrementalDecoder,
    history: Vec<DecisionRecord>,
    logits: Option<Vec<Vec<f64>>>,
    rng: Option<ChaCha8Rng>,
}

impl<B: Backend, T: LlmTransport> Run<'_, B, T> {
    fn event(&mut self, kind: EventKind) {
        let t = self.clock.now();
        self.record.push(t, kind);
    }

    fn prefill(&mut self, initial: bool) -> Result<(B::Cache, StepOutput), OrchestratorError> {
        let n = self.context.len();
        self.event(if initial { EventKind::PrefillStart { tokens: n } } else { EventKind::RePrefillStart { tokens: n } });
        let out = self.orch.slm.prefill(&self.context)?;
        self.clock.charge(Work::Prefill { tokens: n });
        if !initial {
            self.clock.inject(self.orch.transport.latency_profile().reprefill_delay_s);
        }
        self.event(if initial { EventKind::PrefillEnd } else { EventKind::RePrefillEnd });
        Ok(out)
    }

    fn pick(&mut self, logits: &[f64]) -> TokenId {
        match (&mut self.rng, self.cfg.sampling) {
            (Some(rng), Sampling::Temperature { temperature, .. }) => sample_with_temperature(logits, temperature, rng),
            _ => greedy_next(logits),
        }
    }

    fn emit(&mut self, token: TokenId, source: Route, confidence: Option<f64>, sink: &mut dyn FnMut(&TaggedToken)) {
        let position = self.tokens.len();
        let text = self.decoder.push(token);
        self.text.push_str(&text);
        let tagged = TaggedToken { token, text, source, confidence, emitted_at: self.clock.now() - self.origin };
        sink(&tagged);
        self.tokens.push(tagged);
        self.context.push(token);
        self.event(EventKind::Emit { position, source, token });
    }

    fn call_llm(&mut self, candidate: TokenId, hidden: &HiddenState) -> Result<Vec<TokenId>, TransportError> {
        let tok = ByteTokenizer;
        let transcript = tok.decode(&self.context);
        let candidate_text = tok.token_text(candidate);
        let request = build_routing_request(&RequestState {
            transcript: &transcript,
            candidate: &candidate_text,
            token_index: self.tokens.len(),
            threshold: self.cfg.threshold,
            hidden: Some(hidden),
            history: &self.history,
            session_id: &self.session_id,
        });
        let position = self.tokens.len();
        let profile = self.orch.transport.latency_profile();
        let start = self.clock.now();
        self.record.push(start, EventKind::LlmCallStart { position, request_id: request.meta_data.request_id.clone() });
        let result = self.orch.transport.route(&request).or_else(|first| {
            log::warn!("routing call failed, retrying once: {first}");
            self.orch.transport.route(&request)
        });
        match result {
            Ok(response) => {
                self.clock.settle(start, profile.comm_delay_s + response.llm_time_seconds);
                let tokens: Vec<TokenId> = response.tokens.iter().map(|t| t.token).collect();
                self.event(EventKind::LlmCallEnd {
                    position,
                    tokens: tokens.len(),
                    llm_time_seconds: response.llm_time_seconds,
                    ok: true,
                });
                Ok(tokens)
            }
            Err(e) => {
                self.event(EventKind::LlmCallEnd { position, tokens: 0, llm_time_seconds: 0.0, ok: false });
                Err(e)
            }
        }
    }

    fn decode(&mut self, sink: &mut dyn FnMut(&TaggedToken)) -> Result<(), OrchestratorError> {
        let slm = &self.orch.slm;
        let (mut cache, mut out) = self.prefill(true)?;
        let policy = DeferralPolicy::CiterThreshold(self.cfg.threshold);
        while self.tokens.len() < self.cfg.max_tokens {
            let position = self.tokens.len();
            if let Some(l) = self.logits.as_mut() {
                l.push(out.logits.clone());
            }
            let candidate = self.pick(&out.logits);
            let mut confidence = None;
            if self.cfg.mode == Mode::Joint {
                let c = self.orch.router.score(&out.hidden)?;
                self.clock.charge(Work::Router);
                let route = decide(c, policy);
                self.event(EventKind::RouteDecision { position, confidence: c, threshold: self.cfg.threshold, route });
                confidence = Some(c);
                if route == Route::Llm {
                    match self.call_llm(candidate, &out.hidden) {
                        Ok(received) => {
                            let room = (self.cfg.max_tokens - position).min(self.cfg.llm_burst);
                            let mut accepted = Vec::new();
                            let mut finished = false;
                            for &t in received.iter().take(room) {
                                if t == EOS {
                                    finished = true;
                                    break;
                                }
                                accepted.push(t);
                            }
                            for (i, &t) in accepted.iter().enumerate() {
                                self.emit(t, Route::Llm, if i == 0 { confidence } else { None }, sink);
                            }
                            let burst_text = ByteTokenizer.decode(&accepted);
                            self.history.push(DecisionRecord { token: burst_text, route: Route::Llm });
                            if finished || self.tokens.len() >= self.cfg.max_tokens {
                                return Ok(());
                            }
                            if accepted.is_empty() {
                                // Nothing new to condition on; the server sent no usable token.
                                return Err(OrchestratorError::ServerUnreachable("empty response".into()));
                            }
                            match self.cfg.kv_policy {
                                KvPolicy::Incremental => {
                                    self.event(EventKind::CacheExtendStart { tokens: accepted.len() });
                                    for &t in &accepted {
                                        out = slm.decode_step(&mut cache, t)?;
                                    }
                                    self.clock.charge(Work::CacheExtend { tokens: accepted.len() });
                                    self.event(EventKind::CacheExtendEnd);
                                }
                                KvPolicy::RePrefillOnRoute => {
                                    (cache, out) = self.prefill(false)?;
                                }
                            }
                            continue;
                        }
                        Err(e) => {
                            if !self.orch.options.fallback_on_unreachable {
                                return Err(OrchestratorError::ServerUnreachable(e.to_string()));
                            }
                            self.event(EventKind::Fallback { position, reason: e.to_string() });
                        }
                    }
                }
            }
            if candidate == EOS {
                return Ok(());
            }
            self.emit(candidate, Route::Slm, confidence, sink);
            self.history.push(DecisionRecord { token: ByteTokenizer.token_text(candidate), route: Route::Slm });
            if self.tokens.len() >= self.cfg.max_tokens {
                return Ok(());
            }
            self.event(EventKind::SlmStepStart { position: position + 1 });
            out = slm.decode_step(&mut cache, candidate)?;
            self.clock.charge(Work::DecodeStep);
            self.event(EventKind::SlmStepEnd { position: position + 1 });
        }
        Ok(())
    }
}
