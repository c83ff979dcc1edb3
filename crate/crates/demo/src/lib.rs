//! Browser demo: collaborative generation with provenance, a threshold sweep
//! on the oracle task, and the latency breakdown of a single setting.
//!
//! Everything runs on modeled clocks so results are reproducible and nothing
//! touches host time (unavailable in the browser).

use std::sync::Arc;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use tokenroute::bench::{self, OracleParams, OracleTask, SweepConfig};
use tokenroute::clock::{Clock, CostModel, ModeledClock};
use tokenroute::engine::{Backend, ModelConfig, ModelWeights, TinyTransformer};
use tokenroute::metrics::{self, MeanMetrics, RequestMetrics};
use tokenroute::orchestrator::Orchestrator;
use tokenroute::router::RouterModel;
use tokenroute::server::{InProcessTransport, LlmBackend, Server, ServingConfig, Timing};
use tokenroute::trainer::{self, TrainConfig};
use tokenroute::{GenerationConfig, KvPolicy, Mode, Route};

#[derive(Debug, Clone, Serialize)]
pub struct DemoToken {
    pub text: String,
    pub llm: bool,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Generated {
    pub tokens: Vec<DemoToken>,
    pub metrics: Option<RequestMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub routed_ratio: f64,
    pub accuracy: f64,
    pub routing_number: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Curve {
    pub small_only_accuracy: f64,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Latency {
    pub threshold: f64,
    pub metrics: MeanMetrics,
    pub residual_s: f64,
}

fn modeled() -> Box<dyn Clock> {
    Box::new(ModeledClock::new(CostModel::default()))
}

fn serving(comm_ms: f64, llm_ms: f64, burst: usize) -> ServingConfig {
    ServingConfig {
        comm_delay_s: comm_ms / 1000.0,
        llm_latency_s: llm_ms / 1000.0,
        llm_burst: burst.max(1),
        timing: Timing::Modeled,
        ..ServingConfig::default()
    }
}

/// Oracle router trained once on a seed disjoint from every evaluation seed.
fn oracle_router() -> RouterModel {
    let train = OracleTask::new(OracleParams { items: 200, seed: 9_000, ..OracleParams::default() });
    trainer::train(&train.training_dataset(), &TrainConfig { epochs: 40, ..TrainConfig::default() })
        .expect("oracle training data has both classes")
        .0
}

pub struct Demo {
    slm: TinyTransformer,
    llm: TinyTransformer,
    router: RouterModel,
    oracle_router: RouterModel,
}

impl Demo {
    pub fn new(slm_seed: u64, llm_seed: u64) -> Result<Demo, String> {
        let load = |seed| ModelWeights::random(ModelConfig::reference(seed)).map(TinyTransformer::new).map_err(|e| e.to_string());
        let slm = load(slm_seed)?;
        let router = RouterModel::init(&RouterModel::default_dims(slm.hidden_dim()), slm_seed).map_err(|e| e.to_string())?;
        Ok(Demo { slm, llm: load(llm_seed)?, router, oracle_router: oracle_router() })
    }

    /// Generates with the reference models; `burst` is the number of tokens
    /// the large model returns per call.
    pub fn generate(&self, prompt: &str, threshold: f64, max_tokens: usize, burst: usize, reprefill: bool) -> Result<Generated, String> {
        let server = Server::new(LlmBackend::ReferenceEngine { engine: self.llm.clone(), kv_cache: true }, serving(170.0, 900.0, burst))
            .map_err(|e| e.to_string())?;
        let orch = Orchestrator::new(&self.slm, self.router.clone(), InProcessTransport::new(Arc::new(server)));
        let cfg = GenerationConfig {
            mode: Mode::Joint,
            threshold,
            max_tokens,
            llm_burst: burst.max(1),
            kv_policy: if reprefill { KvPolicy::RePrefillOnRoute } else { KvPolicy::Incremental },
            ..GenerationConfig::default()
        };
        let r = orch.generate(prompt, &cfg, &ModeledClock::default()).map_err(|e| e.to_string())?;
        Ok(Generated {
            tokens: r.tokens.iter().map(|t| DemoToken { text: t.text.clone(), llm: t.source == Route::Llm, confidence: t.confidence }).collect(),
            metrics: metrics::compute(&r.events).ok(),
            error: r.error,
        })
    }

    fn oracle_orchestrator(&self, task: &OracleTask, comm_ms: f64, llm_ms: f64) -> Result<Orchestrator<impl Backend, InProcessTransport>, String> {
        let server = Server::new(LlmBackend::ScriptedOracle(task.llm()), serving(comm_ms, llm_ms, 1)).map_err(|e| e.to_string())?;
        Ok(Orchestrator::new(task.slm(), self.oracle_router.clone(), InProcessTransport::new(Arc::new(server))))
    }

    /// Accuracy against routed ratio on the oracle task.
    pub fn sweep(&self, items: usize, corruption: f64, thresholds: &[f64], seed: u64) -> Result<Curve, String> {
        let task = OracleTask::new(OracleParams { items: items.max(1), corruption, seed, ..OracleParams::default() });
        let orch = self.oracle_orchestrator(&task, 170.0, 900.0)?;
        let joint = SweepConfig { thresholds: thresholds.to_vec(), template: GenerationConfig::default(), parallel: false };
        let out = bench::sweep(&orch, task.task(), &joint, &modeled).map_err(|e| e.to_string())?;
        let small = SweepConfig {
            thresholds: vec![0.0],
            template: GenerationConfig { mode: Mode::SmallOnly, ..GenerationConfig::default() },
            parallel: false,
        };
        let base = bench::sweep(&orch, task.task(), &small, &modeled).map_err(|e| e.to_string())?;
        Ok(Curve {
            small_only_accuracy: base.rows[0].accuracy.unwrap_or(0.0),
            points: out
                .rows
                .iter()
                .map(|r| CurvePoint {
                    threshold: r.threshold,
                    routed_ratio: r.routed_ratio,
                    accuracy: r.accuracy.unwrap_or(0.0),
                    routing_number: r.metrics.routing_number,
                })
                .collect(),
        })
    }

    /// Mean latency breakdown for long oracle answers at one threshold.
    pub fn latency(&self, threshold: f64, comm_ms: f64, llm_ms: f64, reprefill: bool) -> Result<Latency, String> {
        let task = OracleTask::new(OracleParams { items: 8, answer_len: 60, corruption: 0.3, seed: 3, ..OracleParams::default() });
        let orch = self.oracle_orchestrator(&task, comm_ms, llm_ms)?;
        let cfg = SweepConfig {
            thresholds: vec![threshold],
            template: GenerationConfig {
                max_tokens: 60,
                kv_policy: if reprefill { KvPolicy::RePrefillOnRoute } else { KvPolicy::Incremental },
                ..GenerationConfig::default()
            },
            parallel: false,
        };
        let row = bench::sweep(&orch, task.task(), &cfg, &modeled).map_err(|e| e.to_string())?.rows.remove(0);
        Ok(Latency { threshold, residual_s: row.metrics.residual_s(), metrics: row.metrics })
    }
}

fn to_js<T: Serialize>(v: Result<T, String>) -> Result<String, JsError> {
    let v = v.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// JavaScript handle. Methods return JSON strings.
#[wasm_bindgen(js_name = Demo)]
pub struct JsDemo(Demo);

#[wasm_bindgen(js_class = Demo)]
impl JsDemo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<JsDemo, JsError> {
        Demo::new(1, 2).map(JsDemo).map_err(|e| JsError::new(&e))
    }

    pub fn generate(&self, prompt: &str, threshold: f64, max_tokens: usize, burst: usize, reprefill: bool) -> Result<String, JsError> {
        to_js(self.0.generate(prompt, threshold, max_tokens, burst, reprefill))
    }

    pub fn sweep(&self, items: usize, corruption: f64, thresholds: Vec<f64>) -> Result<String, JsError> {
        to_js(self.0.sweep(items, corruption, &thresholds, 21))
    }

    pub fn latency(&self, threshold: f64, comm_ms: f64, llm_ms: f64, reprefill: bool) -> Result<String, JsError> {
        to_js(self.0.latency(threshold, comm_ms, llm_ms, reprefill))
    }
}
