//! `tokenroute` command line.
//!
//! Option precedence, highest first: command-line flags, `TOKENROUTE_*`
//! environment variables, the TOML file given by `--config` (one table per
//! subcommand: `[serve]`, `[generate]`, `[bench_sweep]`, `[train_router]`,
//! keys spelled like the flags with underscores), built-in defaults.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage, 3 config file,
//! 4 I/O, 5 model or training, 6 server or transport, 7 benchmark task.

pub mod config;

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use tokenroute::bench::{self, OracleParams, OracleTask, Scorer, SweepConfig, SweepOutcome, TaskSet, DEFAULT_GRID};
use tokenroute::clock::{Clock, CostModel, ModeledClock, MonotonicClock};
use tokenroute::engine::{Backend, ByteTokenizer, ModelConfig, ModelWeights, TinyTransformer};
use tokenroute::metrics;
use tokenroute::orchestrator::{GenerateOptions, Orchestrator, SessionRecord};
use tokenroute::router::RouterModel;
use tokenroute::server::http::{self, AppState, Gateway, HttpTransport};
use tokenroute::server::{InProcessTransport, LlmBackend, LlmTransport, Server, ServingConfig, Timing};
use tokenroute::tensorfile::{TensorFile, MAGIC};
use tokenroute::trainer::{self, DatasetBuilder, GreedyOracle, IterateConfig, TraceMode, TrainConfig};
use tokenroute::wire;
use tokenroute::{GenerationConfig, Mode, Route, Sampling, TaggedToken};

use config::ConfigFile;

/// Delimiters around large-model tokens in terminal output.
pub const LLM_OPEN: &str = "[[";
pub const LLM_CLOSE: &str = "]]";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("model: {0}")]
    Model(String),
    #[error("server: {0}")]
    Server(String),
    #[error("bench: {0}")]
    Bench(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Model(_) => 5,
            CliError::Server(_) => 6,
            CliError::Bench(_) => 7,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn model_err(e: impl std::fmt::Display) -> CliError {
    CliError::Model(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "tokenroute", version, about = "Token-level routing between a small on-device model and a large remote model")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "TOKENROUTE_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the large-model server (and the generation gateway for the console).
    Serve(ServeArgs),
    /// Generate text; large-model tokens are printed inside [[ ]].
    Generate(GenerateArgs),
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Build a routing dataset and train a router.
    TrainRouter(TrainRouterArgs),
    /// Dump a wire message, event log or tensor file.
    Inspect(InspectArgs),
}

#[derive(Subcommand, Debug)]
enum BenchCommand {
    /// Sweep routing thresholds over a task.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeArgs {
    /// Listen address.
    #[arg(long, env = "TOKENROUTE_ADDR")]
    pub addr: Option<String>,
    #[arg(long, env = "TOKENROUTE_COMM_DELAY_MS")]
    pub comm_delay_ms: Option<f64>,
    #[arg(long, env = "TOKENROUTE_LLM_LATENCY_MS")]
    pub llm_latency_ms: Option<f64>,
    #[arg(long, env = "TOKENROUTE_REPREFILL_DELAY_MS")]
    pub reprefill_delay_ms: Option<f64>,
    /// Tokens returned per routed call.
    #[arg(long, env = "TOKENROUTE_BURST")]
    pub burst: Option<usize>,
    #[arg(long, env = "TOKENROUTE_MAX_SESSIONS")]
    pub max_sessions: Option<usize>,
    /// Actually sleep for injected latency.
    #[arg(long, env = "TOKENROUTE_REAL_SLEEPS", num_args = 0..=1, default_missing_value = "true")]
    pub real_sleeps: Option<bool>,
    /// measured or modeled backend timing.
    #[arg(long, env = "TOKENROUTE_TIMING")]
    pub timing: Option<String>,
    /// Keep a server-side KV cache per session.
    #[arg(long, env = "TOKENROUTE_KV_CACHE", num_args = 0..=1, default_missing_value = "true")]
    pub kv_cache: Option<bool>,
    #[arg(long, env = "TOKENROUTE_LLM_WEIGHTS")]
    pub llm_weights: Option<PathBuf>,
    #[arg(long, env = "TOKENROUTE_LLM_SEED")]
    pub llm_seed: Option<u64>,
    /// Serve the generation gateway (/v1/generate) with a local small model.
    #[arg(long, env = "TOKENROUTE_GATEWAY", num_args = 0..=1, default_missing_value = "true")]
    pub gateway: Option<bool>,
    #[arg(long, env = "TOKENROUTE_SLM_WEIGHTS")]
    pub slm_weights: Option<PathBuf>,
    #[arg(long, env = "TOKENROUTE_SLM_SEED")]
    pub slm_seed: Option<u64>,
    #[arg(long, env = "TOKENROUTE_ROUTER")]
    pub router: Option<PathBuf>,
    /// Directory of static console assets served at /.
    #[arg(long, env = "TOKENROUTE_CONSOLE")]
    pub console: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateArgs {
    /// Prompt; lines are read from stdin when absent.
    #[arg(long, env = "TOKENROUTE_PROMPT")]
    pub prompt: Option<String>,
    /// joint or small_only.
    #[arg(long, env = "TOKENROUTE_MODE")]
    pub mode: Option<String>,
    #[arg(long, env = "TOKENROUTE_THRESHOLD")]
    pub threshold: Option<f64>,
    #[arg(long, env = "TOKENROUTE_MAX_TOKENS")]
    pub max_tokens: Option<usize>,
    #[arg(long, env = "TOKENROUTE_BURST")]
    pub burst: Option<usize>,
    /// incremental or reprefill.
    #[arg(long, env = "TOKENROUTE_KV_POLICY")]
    pub kv_policy: Option<String>,
    /// Sample instead of greedy decoding.
    #[arg(long, env = "TOKENROUTE_TEMPERATURE")]
    pub temperature: Option<f64>,
    #[arg(long, env = "TOKENROUTE_SAMPLE_SEED")]
    pub sample_seed: Option<u64>,
    /// monotonic or modeled.
    #[arg(long, env = "TOKENROUTE_CLOCK")]
    pub clock: Option<String>,
    /// Base URL of a running server; in-process when absent.
    #[arg(long, env = "TOKENROUTE_SERVER")]
    pub server: Option<String>,
    #[arg(long, env = "TOKENROUTE_COMM_DELAY_MS")]
    pub comm_delay_ms: Option<f64>,
    #[arg(long, env = "TOKENROUTE_LLM_LATENCY_MS")]
    pub llm_latency_ms: Option<f64>,
    #[arg(long, env = "TOKENROUTE_REPREFILL_DELAY_MS")]
    pub reprefill_delay_ms: Option<f64>,
    #[arg(long, env = "TOKENROUTE_SLM_WEIGHTS")]
    pub slm_weights: Option<PathBuf>,
    #[arg(long, env = "TOKENROUTE_SLM_SEED")]
    pub slm_seed: Option<u64>,
    #[arg(long, env = "TOKENROUTE_LLM_WEIGHTS")]
    pub llm_weights: Option<PathBuf>,
    #[arg(long, env = "TOKENROUTE_LLM_SEED")]
    pub llm_seed: Option<u64>,
    #[arg(long, env = "TOKENROUTE_ROUTER")]
    pub router: Option<PathBuf>,
    /// Write the event log (JSON lines) here.
    #[arg(long, env = "TOKENROUTE_EVENTS")]
    pub events: Option<PathBuf>,
    /// Print the full result as JSON instead of marked text.
    #[arg(long, env = "TOKENROUTE_JSON", num_args = 0..=1, default_missing_value = "true")]
    pub json: Option<bool>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepArgs {
    /// Task file (.csv or .jsonl with prompt/answer) or `oracle`.
    #[arg(long, env = "TOKENROUTE_TASK")]
    pub task: Option<String>,
    /// exact_match or choice_letter.
    #[arg(long, env = "TOKENROUTE_SCORER")]
    pub scorer: Option<String>,
    #[arg(long, env = "TOKENROUTE_THRESHOLDS", value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long, env = "TOKENROUTE_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "TOKENROUTE_MODE")]
    pub mode: Option<String>,
    #[arg(long, env = "TOKENROUTE_MAX_TOKENS")]
    pub max_tokens: Option<usize>,
    #[arg(long, env = "TOKENROUTE_BURST")]
    pub burst: Option<usize>,
    #[arg(long, env = "TOKENROUTE_KV_POLICY")]
    pub kv_policy: Option<String>,
    /// modeled (default) or monotonic.
    #[arg(long, env = "TOKENROUTE_CLOCK")]
    pub clock: Option<String>,
    /// Also run a small-only baseline into OUT/small_only.
    #[arg(long, env = "TOKENROUTE_BASELINE", num_args = 0..=1, default_missing_value = "true")]
    pub baseline: Option<bool>,
    /// Run items one at a time.
    #[arg(long, env = "TOKENROUTE_SERIAL", num_args = 0..=1, default_missing_value = "true")]
    pub serial: Option<bool>,
    #[arg(long, env = "TOKENROUTE_SERVER")]
    pub server: Option<String>,
    #[arg(long, env = "TOKENROUTE_COMM_DELAY_MS")]
    pub comm_delay_ms: Option<f64>,
    #[arg(long, env = "TOKENROUTE_LLM_LATENCY_MS")]
    pub llm_latency_ms: Option<f64>,
    #[arg(long, env = "TOKENROUTE_REPREFILL_DELAY_MS")]
    pub reprefill_delay_ms: Option<f64>,
    #[arg(long, env = "TOKENROUTE_SLM_WEIGHTS")]
    pub slm_weights: Option<PathBuf>,
    #[arg(long, env = "TOKENROUTE_SLM_SEED")]
    pub slm_seed: Option<u64>,
    #[arg(long, env = "TOKENROUTE_LLM_WEIGHTS")]
    pub llm_weights: Option<PathBuf>,
    #[arg(long, env = "TOKENROUTE_LLM_SEED")]
    pub llm_seed: Option<u64>,
    #[arg(long, env = "TOKENROUTE_ROUTER")]
    pub router: Option<PathBuf>,
    #[arg(long, env = "TOKENROUTE_ORACLE_ITEMS")]
    pub oracle_items: Option<usize>,
    #[arg(long, env = "TOKENROUTE_ORACLE_LEN")]
    pub oracle_len: Option<usize>,
    #[arg(long, env = "TOKENROUTE_ORACLE_CORRUPTION")]
    pub oracle_corruption: Option<f64>,
    #[arg(long, env = "TOKENROUTE_ORACLE_SEED")]
    pub oracle_seed: Option<u64>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRouterArgs {
    /// Directory of text files; each non-empty line is one sequence.
    #[arg(long, env = "TOKENROUTE_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// Train on the synthetic oracle task instead of a corpus.
    #[arg(long, env = "TOKENROUTE_ORACLE", num_args = 0..=1, default_missing_value = "true")]
    pub oracle: Option<bool>,
    #[arg(long, env = "TOKENROUTE_ORACLE_ITEMS")]
    pub oracle_items: Option<usize>,
    #[arg(long, env = "TOKENROUTE_ORACLE_LEN")]
    pub oracle_len: Option<usize>,
    #[arg(long, env = "TOKENROUTE_ORACLE_CORRUPTION")]
    pub oracle_corruption: Option<f64>,
    #[arg(long, env = "TOKENROUTE_ORACLE_SEED")]
    pub oracle_seed: Option<u64>,
    /// Router output file.
    #[arg(long, env = "TOKENROUTE_OUT")]
    pub out: Option<PathBuf>,
    /// Also save the (last round's) dataset.
    #[arg(long, env = "TOKENROUTE_DATASET_OUT")]
    pub dataset_out: Option<PathBuf>,
    #[arg(long, env = "TOKENROUTE_SLM_WEIGHTS")]
    pub slm_weights: Option<PathBuf>,
    #[arg(long, env = "TOKENROUTE_SLM_SEED")]
    pub slm_seed: Option<u64>,
    #[arg(long, env = "TOKENROUTE_LLM_WEIGHTS")]
    pub llm_weights: Option<PathBuf>,
    #[arg(long, env = "TOKENROUTE_LLM_SEED")]
    pub llm_seed: Option<u64>,
    #[arg(long, env = "TOKENROUTE_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "TOKENROUTE_LEARNING_RATE")]
    pub learning_rate: Option<f64>,
    #[arg(long, env = "TOKENROUTE_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "TOKENROUTE_L2_PENALTY")]
    pub l2_penalty: Option<f64>,
    #[arg(long, env = "TOKENROUTE_HIDDEN_UNITS")]
    pub hidden_units: Option<usize>,
    #[arg(long, env = "TOKENROUTE_SEED")]
    pub seed: Option<u64>,
    /// Collect-and-train rounds.
    #[arg(long, env = "TOKENROUTE_ROUNDS")]
    pub rounds: Option<usize>,
    /// fixed or on_policy.
    #[arg(long, env = "TOKENROUTE_TRACE_MODE")]
    pub trace_mode: Option<String>,
    /// Threshold used by the router in rounds after the first.
    #[arg(long, env = "TOKENROUTE_THRESHOLD")]
    pub threshold: Option<f64>,
    /// Resolve positions both models get wrong by greedy rollouts this long.
    #[arg(long, env = "TOKENROUTE_ROLLOUT_HORIZON")]
    pub rollout_horizon: Option<usize>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Request/response JSON, event log (.jsonl) or tensor file.
    file: PathBuf,
}

/// Runs the command line `args` (without the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv = std::iter::once(OsString::from("tokenroute")).chain(args.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("usage: tokenroute <serve|generate|bench sweep|train-router|inspect> [OPTIONS] (see --help)");
            }
            e.code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Serve(a) => serve(file.overlay("serve", a)?),
        Command::Generate(a) => generate(file.overlay("generate", a)?),
        Command::Bench { command: BenchCommand::Sweep(a) } => bench_sweep(file.overlay("bench_sweep", a)?),
        Command::TrainRouter(a) => train_router(file.overlay("train_router", a)?),
        Command::Inspect(a) => inspect(&a.file),
    }
}

fn parse_opt<T: std::str::FromStr<Err = String>>(v: Option<&str>, default: T) -> Result<T, CliError> {
    v.map_or(Ok(default), |s| s.parse().map_err(CliError::Usage))
}

fn parse_timing(v: Option<&str>, default: Timing) -> Result<Timing, CliError> {
    match v {
        None => Ok(default),
        Some("measured") => Ok(Timing::Measured),
        Some("modeled") => Ok(Timing::Modeled),
        Some(o) => Err(CliError::Usage(format!("unknown timing {o:?} (expected measured or modeled)"))),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum ClockKind {
    Modeled,
    Monotonic,
}

fn parse_clock(v: Option<&str>, default: ClockKind) -> Result<ClockKind, CliError> {
    match v {
        None => Ok(default),
        Some("modeled") => Ok(ClockKind::Modeled),
        Some("monotonic") => Ok(ClockKind::Monotonic),
        Some(o) => Err(CliError::Usage(format!("unknown clock {o:?} (expected modeled or monotonic)"))),
    }
}

fn make_clock(kind: ClockKind) -> Box<dyn Clock> {
    match kind {
        ClockKind::Modeled => Box::new(ModeledClock::new(CostModel::default())),
        ClockKind::Monotonic => Box::new(MonotonicClock::new(false)),
    }
}

fn serving_config(
    comm_ms: Option<f64>,
    llm_ms: Option<f64>,
    reprefill_ms: Option<f64>,
    burst: Option<usize>,
    timing: Timing,
) -> Result<ServingConfig, CliError> {
    let d = ServingConfig::default();
    let cfg = ServingConfig {
        comm_delay_s: comm_ms.map_or(d.comm_delay_s, |v| v / 1000.0),
        llm_latency_s: llm_ms.map_or(d.llm_latency_s, |v| v / 1000.0),
        reprefill_delay_s_per_call: reprefill_ms.map_or(d.reprefill_delay_s_per_call, |v| v / 1000.0),
        llm_burst: burst.unwrap_or(d.llm_burst),
        timing,
        ..d
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_engine(weights: Option<&Path>, seed: u64) -> Result<TinyTransformer, CliError> {
    let w = match weights {
        Some(p) => ModelWeights::load(p).map_err(|e| CliError::Model(format!("{}: {e}", p.display())))?,
        None => ModelWeights::random(ModelConfig::reference(seed)).map_err(model_err)?,
    };
    Ok(TinyTransformer::new(w))
}

fn load_router(path: Option<&Path>, hidden_dim: usize) -> Result<RouterModel, CliError> {
    match path {
        Some(p) => RouterModel::load_for_engine(p, hidden_dim).map_err(|e| CliError::Model(format!("{}: {e}", p.display()))),
        None => {
            log::warn!("no --router given, using an untrained router");
            RouterModel::init(&RouterModel::default_dims(hidden_dim), 0).map_err(model_err)
        }
    }
}

fn connect(url: &str) -> Result<Arc<dyn LlmTransport>, CliError> {
    Ok(Arc::new(HttpTransport::connect(url).map_err(|e| CliError::Server(e.to_string()))?))
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let addr: SocketAddr = a
        .addr
        .as_deref()
        .unwrap_or("127.0.0.1:8080")
        .parse()
        .map_err(|e| CliError::Usage(format!("--addr: {e}")))?;
    let mut cfg = serving_config(a.comm_delay_ms, a.llm_latency_ms, a.reprefill_delay_ms, a.burst, parse_timing(a.timing.as_deref(), Timing::Measured)?)?;
    cfg.real_sleeps = a.real_sleeps.unwrap_or(false);
    if let Some(m) = a.max_sessions {
        cfg.max_sessions = m;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let engine = load_engine(a.llm_weights.as_deref(), a.llm_seed.unwrap_or(2))?;
    let backend = LlmBackend::ReferenceEngine { engine, kv_cache: a.kv_cache.unwrap_or(true) };
    let server = Arc::new(Server::new(backend, cfg).map_err(|e| CliError::Usage(e.to_string()))?);
    let gateway = if a.gateway.unwrap_or(true) {
        let slm = load_engine(a.slm_weights.as_deref(), a.slm_seed.unwrap_or(1))?;
        let router = load_router(a.router.as_deref(), slm.hidden_dim())?;
        let orch = Orchestrator::new(slm, router, InProcessTransport::new(server.clone()));
        Some(Arc::new(Gateway::new(Arc::new(orch))))
    } else {
        None
    };
    if let Some(dir) = &a.console {
        if !dir.join("index.html").is_file() {
            return Err(io_err(dir, "no index.html in console directory"));
        }
    }
    let app = http::app(AppState { server, gateway }, a.console.clone());
    let handle = http::spawn(app, addr).map_err(|e| CliError::Server(format!("bind {addr}: {e}")))?;
    println!("listening on {}", handle.url());
    let _ = std::io::stdout().flush();
    loop {
        std::thread::park();
    }
}

fn generation_config(
    mode: Option<&str>,
    threshold: Option<f64>,
    max_tokens: Option<usize>,
    burst: Option<usize>,
    kv_policy: Option<&str>,
) -> Result<GenerationConfig, CliError> {
    let d = GenerationConfig::default();
    GenerationConfig {
        mode: parse_opt(mode, d.mode)?,
        threshold: threshold.unwrap_or(d.threshold),
        max_tokens: max_tokens.unwrap_or(d.max_tokens),
        llm_burst: burst.unwrap_or(d.llm_burst),
        kv_policy: parse_opt(kv_policy, d.kv_policy)?,
        ..d
    }
    .validate()
    .map_err(|e| CliError::Usage(e.to_string()))
}

/// Renders tokens with large-model runs wrapped in delimiters.
pub fn render_marked(tokens: &[TaggedToken]) -> String {
    let mut m = Marker::default();
    let mut s: String = tokens.iter().map(|t| m.push(t)).collect();
    s.push_str(&m.finish());
    s
}

#[derive(Default)]
struct Marker {
    in_llm: bool,
}

impl Marker {
    fn push(&mut self, t: &TaggedToken) -> String {
        let mut s = String::new();
        match (self.in_llm, t.source) {
            (false, Route::Llm) => s.push_str(LLM_OPEN),
            (true, Route::Slm) => s.push_str(LLM_CLOSE),
            _ => {}
        }
        self.in_llm = t.source == Route::Llm;
        s.push_str(&t.text);
        s
    }

    fn finish(&mut self) -> String {
        std::mem::take(&mut self.in_llm).then(|| LLM_CLOSE.to_string()).unwrap_or_default()
    }
}

fn generate(a: GenerateArgs) -> Result<(), CliError> {
    let mut cfg = generation_config(a.mode.as_deref(), a.threshold, a.max_tokens, a.burst, a.kv_policy.as_deref())?;
    if let Some(t) = a.temperature {
        cfg.sampling = Sampling::Temperature { temperature: t, seed: a.sample_seed.unwrap_or(0) };
        cfg = cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let clock_kind = parse_clock(a.clock.as_deref(), ClockKind::Monotonic)?;
    let transport: Arc<dyn LlmTransport> = match &a.server {
        Some(url) => connect(url)?,
        None => {
            let timing = if clock_kind == ClockKind::Modeled { Timing::Modeled } else { Timing::Measured };
            let serving = serving_config(a.comm_delay_ms, a.llm_latency_ms, a.reprefill_delay_ms, a.burst, timing)?;
            let engine = load_engine(a.llm_weights.as_deref(), a.llm_seed.unwrap_or(2))?;
            let server = Server::new(LlmBackend::ReferenceEngine { engine, kv_cache: true }, serving).map_err(|e| CliError::Usage(e.to_string()))?;
            Arc::new(InProcessTransport::new(Arc::new(server)))
        }
    };
    let slm = load_engine(a.slm_weights.as_deref(), a.slm_seed.unwrap_or(1))?;
    let router = if cfg.mode == Mode::SmallOnly && a.router.is_none() {
        RouterModel::init(&RouterModel::default_dims(slm.hidden_dim()), 0).map_err(model_err)?
    } else {
        load_router(a.router.as_deref(), slm.hidden_dim())?
    };
    let orch = Orchestrator::new(slm, router, transport).with_options(GenerateOptions { fallback_on_unreachable: true, ..Default::default() });

    let prompts: Vec<String> = match a.prompt {
        Some(p) => vec![p],
        None => std::io::stdin().lock().lines().collect::<Result<_, _>>().map_err(|e| CliError::Io(format!("stdin: {e}")))?,
    };
    let json = a.json.unwrap_or(false);
    let mut log = SessionRecord::default();
    for prompt in prompts.iter().filter(|p| !p.is_empty()) {
        let clock = make_clock(clock_kind);
        let mut out = std::io::stdout().lock();
        let mut marker = Marker::default();
        let result = orch
            .stream_generate(prompt, &cfg, clock.as_ref(), &mut |t| {
                if !json {
                    let _ = write!(out, "{}", marker.push(t));
                    let _ = out.flush();
                }
            })
            .map_err(|e| match e {
                tokenroute::orchestrator::OrchestratorError::ServerUnreachable(m) => CliError::Server(m),
                tokenroute::orchestrator::OrchestratorError::EmptyPrompt | tokenroute::orchestrator::OrchestratorError::Config(_) => {
                    CliError::Usage(e.to_string())
                }
                other => CliError::Model(other.to_string()),
            })?;
        if json {
            let m = metrics::compute(&result.events).ok();
            let v = serde_json::json!({ "result": result, "metrics": m, "marked": render_marked(&result.tokens) });
            writeln!(out, "{}", serde_json::to_string_pretty(&v).map_err(|e| CliError::Internal(e.to_string()))?)
                .map_err(|e| CliError::Io(e.to_string()))?;
        } else {
            let _ = writeln!(out, "{}", marker.finish());
            if let Ok(m) = metrics::compute(&result.events) {
                eprintln!(
                    "[{} tokens, {} from LLM, {} LLM calls, ttft {:.3}s, overall {:.3}s]",
                    m.generated_tokens, m.routed_tokens, m.routing_number, m.ttft_s, m.overall_s
                );
            }
        }
        if let Some(e) = &result.error {
            eprintln!("warning: generation stopped early: {e}");
        }
        for ev in &result.events.events {
            log.events.push(ev.clone());
        }
    }
    if let Some(p) = &a.events {
        std::fs::write(p, log.to_jsonl()).map_err(|e| io_err(p, e))?;
    }
    Ok(())
}

fn oracle_params(items: Option<usize>, len: Option<usize>, corruption: Option<f64>, seed: Option<u64>) -> Result<OracleParams, CliError> {
    let d = OracleParams::default();
    let p = OracleParams {
        items: items.unwrap_or(d.items),
        answer_len: len.unwrap_or(d.answer_len),
        corruption: corruption.unwrap_or(d.corruption),
        seed: seed.unwrap_or(d.seed),
        ..d
    };
    if p.items == 0 || p.answer_len == 0 || !(0.0..=1.0).contains(&p.corruption) {
        return Err(CliError::Usage("oracle task needs items >= 1, len >= 1 and corruption in [0, 1]".into()));
    }
    Ok(p)
}

/// Training seed offset used when the oracle router is trained on the fly,
/// so it never sees the evaluation items.
const ORACLE_TRAIN_SEED_OFFSET: u64 = 1000;

fn bench_sweep(a: SweepArgs) -> Result<(), CliError> {
    let task_spec = a.task.clone().ok_or_else(|| CliError::Usage("bench sweep needs --task FILE or --task oracle".into()))?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("sweep_out"));
    let thresholds = a.thresholds.clone().unwrap_or_else(|| DEFAULT_GRID.to_vec());
    let template = generation_config(a.mode.as_deref(), Some(0.0), a.max_tokens, a.burst, a.kv_policy.as_deref())?;
    let clock_kind = parse_clock(a.clock.as_deref(), ClockKind::Modeled)?;
    let timing = if clock_kind == ClockKind::Modeled { Timing::Modeled } else { Timing::Measured };
    let serving = serving_config(a.comm_delay_ms, a.llm_latency_ms, a.reprefill_delay_ms, a.burst, timing)?;
    let sweep_cfg = SweepConfig { thresholds, template, parallel: !a.serial.unwrap_or(false) };
    let baseline = a.baseline.unwrap_or(false);

    let (outcome, base) = if task_spec == "oracle" {
        let params = oracle_params(a.oracle_items, a.oracle_len, a.oracle_corruption, a.oracle_seed)?;
        let task = OracleTask::new(params);
        let router = match &a.router {
            Some(p) => load_router(Some(p), params.hidden_dim)?,
            None => {
                let train = OracleTask::new(OracleParams { seed: params.seed + ORACLE_TRAIN_SEED_OFFSET, ..params });
                let cfg = TrainConfig { epochs: 40, ..TrainConfig::default() };
                log::info!("training oracle router on seed {}", params.seed + ORACLE_TRAIN_SEED_OFFSET);
                trainer::train(&train.training_dataset(), &cfg).map_err(model_err)?.0
            }
        };
        let transport: Arc<dyn LlmTransport> = match &a.server {
            Some(url) => connect(url)?,
            None => Arc::new(InProcessTransport::new(Arc::new(
                Server::new(LlmBackend::ScriptedOracle(task.llm()), serving).map_err(|e| CliError::Usage(e.to_string()))?,
            ))),
        };
        let orch = Orchestrator::new(task.slm(), router, transport);
        run_sweeps(&orch, task.task(), &sweep_cfg, clock_kind, baseline)?
    } else {
        let scorer: Scorer = parse_opt(a.scorer.as_deref(), Scorer::ExactMatch)?;
        let task = TaskSet::load(&task_spec, scorer).map_err(|e| CliError::Bench(format!("{task_spec}: {e}")))?;
        let slm = load_engine(a.slm_weights.as_deref(), a.slm_seed.unwrap_or(1))?;
        let router = load_router(a.router.as_deref(), slm.hidden_dim())?;
        let transport: Arc<dyn LlmTransport> = match &a.server {
            Some(url) => connect(url)?,
            None => {
                let engine = load_engine(a.llm_weights.as_deref(), a.llm_seed.unwrap_or(2))?;
                Arc::new(InProcessTransport::new(Arc::new(
                    Server::new(LlmBackend::ReferenceEngine { engine, kv_cache: true }, serving).map_err(|e| CliError::Usage(e.to_string()))?,
                )))
            }
        };
        let orch = Orchestrator::new(slm, router, transport);
        run_sweeps(&orch, &task, &sweep_cfg, clock_kind, baseline)?
    };

    bench::write_outputs(&outcome, &out).map_err(|e| io_err(&out, e))?;
    print!("{}", bench::summary(&outcome));
    if let Some(b) = base {
        let dir = out.join("small_only");
        bench::write_outputs(&b, &dir).map_err(|e| io_err(&dir, e))?;
        println!("small_only accuracy {:.4}", b.rows[0].accuracy.unwrap_or(f64::NAN));
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run_sweeps<B: Backend, T: LlmTransport>(
    orch: &Orchestrator<B, T>,
    task: &TaskSet,
    cfg: &SweepConfig,
    clock: ClockKind,
    baseline: bool,
) -> Result<(SweepOutcome, Option<SweepOutcome>), CliError> {
    let factory = move || make_clock(clock);
    let bench_err = |e: bench::BenchError| CliError::Bench(e.to_string());
    let main = bench::sweep(orch, task, cfg, &factory).map_err(bench_err)?;
    if main.rows.iter().all(|r| r.failed == r.requests) && !main.rows.is_empty() {
        return Err(CliError::Server(format!("every request failed: {}", first_error(&main).unwrap_or_default())));
    }
    let base = if baseline {
        let small = SweepConfig {
            thresholds: vec![0.0],
            template: GenerationConfig { mode: Mode::SmallOnly, ..cfg.template },
            parallel: cfg.parallel,
        };
        Some(bench::sweep(orch, task, &small, &factory).map_err(bench_err)?)
    } else {
        None
    };
    Ok((main, base))
}

fn first_error(o: &SweepOutcome) -> Option<String> {
    o.runs.iter().flatten().find_map(|r| r.error.clone())
}

fn read_corpus(dir: &Path, max_len: usize) -> Result<Vec<Vec<tokenroute::TokenId>>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut corpus = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| io_err(&f, e))?;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let mut ids = ByteTokenizer.encode_with_bos(line);
            ids.truncate(max_len);
            corpus.push(ids);
        }
    }
    if corpus.is_empty() {
        return Err(CliError::Usage(format!("{}: corpus has no non-empty lines", dir.display())));
    }
    Ok(corpus)
}

fn train_router(a: TrainRouterArgs) -> Result<(), CliError> {
    let out = a.out.clone().ok_or_else(|| CliError::Usage("train-router needs --out FILE".into()))?;
    let d = TrainConfig::default();
    let tcfg = TrainConfig {
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        seed: a.seed.unwrap_or(d.seed),
        l2_penalty: a.l2_penalty.unwrap_or(d.l2_penalty),
        hidden_units: a.hidden_units.or(d.hidden_units),
    };
    let (model, dataset) = match (a.oracle.unwrap_or(false), &a.corpus) {
        (true, Some(_)) => return Err(CliError::Usage("--oracle and --corpus are exclusive".into())),
        (false, None) => return Err(CliError::Usage("train-router needs --corpus DIR or --oracle".into())),
        (true, None) => {
            let params = oracle_params(a.oracle_items, a.oracle_len, a.oracle_corruption, a.oracle_seed)?;
            let dataset = OracleTask::new(params).training_dataset();
            let (model, report) = trainer::train(&dataset, &tcfg).map_err(model_err)?;
            eprintln!(
                "{} examples, loss {:.4} -> {:.4}, train accuracy {:.4}",
                dataset.len(),
                report.initial_loss,
                report.final_loss,
                report.train_accuracy
            );
            (model, dataset)
        }
        (false, Some(dir)) => {
            let slm = load_engine(a.slm_weights.as_deref(), a.slm_seed.unwrap_or(1))?;
            let llm = GreedyOracle(load_engine(a.llm_weights.as_deref(), a.llm_seed.unwrap_or(2))?);
            let corpus = read_corpus(dir, slm.weights().config.max_seq_len)?;
            let mut builder = DatasetBuilder::new(&slm, &llm);
            builder.rollout_horizon = a.rollout_horizon;
            let trace_mode = match a.trace_mode.as_deref() {
                None | Some("fixed") => TraceMode::Fixed,
                Some("on_policy") => TraceMode::OnPolicy,
                Some(o) => return Err(CliError::Usage(format!("unknown trace mode {o:?} (expected fixed or on_policy)"))),
            };
            let icfg = IterateConfig {
                rounds: a.rounds.unwrap_or(1),
                trace_mode,
                threshold: a.threshold.unwrap_or(0.5),
                train: tcfg,
                ..IterateConfig::default()
            };
            let outcome = trainer::iterate(&builder, &corpus, None, &icfg).map_err(model_err)?;
            for r in &outcome.rounds {
                eprintln!(
                    "round {}: {} examples (slm {}, llm {}, rollout {}), loss {:.4}, train accuracy {:.4}",
                    r.round, r.examples, r.counts.prefer_slm, r.counts.prefer_llm, r.counts.needs_rollout, r.train_loss, r.train_accuracy
                );
            }
            let dataset = outcome.datasets.into_iter().last().unwrap_or_default();
            (outcome.model, dataset)
        }
    };
    model.save(&out).map_err(|e| io_err(&out, e))?;
    if let Some(p) = &a.dataset_out {
        dataset.save(p).map_err(|e| io_err(p, e))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn inspect(path: &Path) -> Result<(), CliError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let pretty = |v: &serde_json::Value| serde_json::to_string_pretty(v).unwrap_or_default();
    if bytes.starts_with(MAGIC) {
        let f = TensorFile::from_bytes(&bytes).map_err(|e| io_err(path, e))?;
        let tensors: Vec<_> = f.tensors().iter().map(|t| serde_json::json!({ "name": t.name, "shape": t.shape })).collect();
        println!("{}", pretty(&serde_json::json!({ "kind": f.kind, "meta": f.meta, "tensors": tensors })));
        return Ok(());
    }
    let text = String::from_utf8(bytes).map_err(|_| io_err(path, "not UTF-8 and not a tensor file"))?;
    let trimmed = text.trim();
    if let Ok(req) = wire::parse_request(trimmed.as_bytes()) {
        let canonical = wire::serialize_request(&req).map_err(|e| CliError::Internal(e.to_string()))?;
        println!("routing request ({})", if req.validate().is_ok() { "valid" } else { "invalid" });
        println!("{}", String::from_utf8_lossy(&canonical));
        return Ok(());
    }
    if let Ok(resp) = wire::parse_response(trimmed.as_bytes()) {
        let canonical = wire::serialize_response(&resp).map_err(|e| CliError::Internal(e.to_string()))?;
        println!("routing response");
        println!("{}", String::from_utf8_lossy(&canonical));
        return Ok(());
    }
    match SessionRecord::from_jsonl(&text) {
        Ok(record) if !record.events.is_empty() => {
            let mut kinds = std::collections::BTreeMap::<String, usize>::new();
            for e in &record.events {
                let v = serde_json::to_value(&e.kind).unwrap_or_default();
                *kinds.entry(v["kind"].as_str().unwrap_or("?").to_string()).or_default() += 1;
            }
            let m = metrics::compute(&record).map_err(|e| CliError::Bench(e.to_string()))?;
            println!("{}", pretty(&serde_json::json!({ "events": record.events.len(), "by_kind": kinds, "metrics": m })));
            Ok(())
        }
        _ => {
            // Report why it failed to parse as a request, the most common case.
            let why = wire::parse_request(trimmed.as_bytes()).err().map(|e| e.to_string()).unwrap_or_default();
            Err(CliError::Usage(format!("{}: not a wire message, event log or tensor file ({why})", path.display())))
        }
    }
}
