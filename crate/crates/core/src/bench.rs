//! Threshold sweeps, scoring and the synthetic oracle task.
//!
//! [`OracleTask`] is a desk-scale stand-in for a multiple-choice benchmark.
//! Every item has a short uppercase answer. The large model is a
//! [`ScriptedOracle`] that always writes the answer; the small model
//! ([`OracleSlm`]) writes it too but gets a seeded fraction `p` of positions
//! wrong. Its hidden state carries a noisy signal of whether the current
//! position is one of the wrong ones, which is exactly what a router can
//! learn.

use std::collections::HashSet;
use std::io::{BufRead, Read};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::engine::{Backend, ByteTokenizer, EngineError, StepOutput, BOS, EOS, VOCAB_SIZE};
use crate::metrics::{self, aggregate, RequestMetrics, SweepRow};
use crate::orchestrator::{GenerationResult, Orchestrator, SessionRecord};
use crate::server::{LlmTransport, ScriptedOracle};
use crate::trainer::{shortcut_label, Dataset, TrainingExample};
use crate::types::{GenerationConfig, HiddenState, TokenId};

/// The threshold grid used by default in sweeps.
pub const DEFAULT_GRID: [f64; 8] = [0.40, 0.50, 0.60, 0.70, 0.72, 0.76, 0.80, 0.90];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("task has no items")]
    EmptyTask,
    #[error("item {0} has an empty answer")]
    EmptyAnswer(usize),
    #[error("duplicate prompt at item {0}")]
    DuplicatePrompt(usize),
    #[error("thresholds must be sorted ascending and lie in [0, 1]")]
    BadThresholds,
    #[error("task file: {0}")]
    Parse(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    #[default]
    ExactMatch,
    ChoiceLetter,
}

impl std::str::FromStr for Scorer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact_match" | "exact" => Ok(Scorer::ExactMatch),
            "choice_letter" | "choice" => Ok(Scorer::ChoiceLetter),
            other => Err(format!("unknown scorer {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskItem {
    pub prompt: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    items: Vec<TaskItem>,
    pub scorer: Scorer,
}

impl TaskSet {
    pub fn new(items: Vec<TaskItem>, scorer: Scorer) -> Result<Self, BenchError> {
        if items.is_empty() {
            return Err(BenchError::EmptyTask);
        }
        let mut seen = HashSet::new();
        for (i, item) in items.iter().enumerate() {
            if item.answer.trim().is_empty() {
                return Err(BenchError::EmptyAnswer(i));
            }
            if !seen.insert(item.prompt.as_str()) {
                return Err(BenchError::DuplicatePrompt(i));
            }
        }
        Ok(TaskSet { items, scorer })
    }

    pub fn items(&self) -> &[TaskItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// CSV with a `prompt,answer` header.
    pub fn from_csv<R: Read>(reader: R, scorer: Scorer) -> Result<Self, BenchError> {
        let mut r = csv::Reader::from_reader(reader);
        let items = r
            .deserialize::<TaskItem>()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| BenchError::Parse(e.to_string()))?;
        Self::new(items, scorer)
    }

    /// One `{"prompt": ..., "answer": ...}` object per line.
    pub fn from_jsonl<R: BufRead>(reader: R, scorer: Scorer) -> Result<Self, BenchError> {
        let mut items = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            items.push(serde_json::from_str(&line).map_err(|e| BenchError::Parse(format!("line {}: {e}", i + 1)))?);
        }
        Self::new(items, scorer)
    }

    /// Picks the format from the extension (`.csv`, otherwise JSON lines).
    pub fn load(path: impl AsRef<Path>, scorer: Scorer) -> Result<Self, BenchError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            Self::from_csv(file, scorer)
        } else {
            Self::from_jsonl(std::io::BufReader::new(file), scorer)
        }
    }
}

pub fn normalize(s: &str) -> String {
    let lowered = s.trim().to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.trim_end_matches(['.', '!', '?', ',', ';', ':']).to_string()
}

/// First option letter A-E that stands alone (not part of a longer word).
pub fn choice_letter(output: &str) -> Option<char> {
    let chars: Vec<char> = output.chars().collect();
    (0..chars.len()).find_map(|i| {
        let c = chars[i];
        let alone = |j: Option<usize>| j.and_then(|j| chars.get(j)).is_none_or(|n| !n.is_alphanumeric());
        (('A'..='E').contains(&c) && alone(i.checked_sub(1)) && alone(Some(i + 1))).then_some(c)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub correct: bool,
    /// Output could not be interpreted at all.
    pub flagged: bool,
}

pub fn score_one(output: &str, answer: &str, scorer: Scorer) -> Score {
    match scorer {
        Scorer::ExactMatch => {
            let out = normalize(output);
            Score { correct: !out.is_empty() && out == normalize(answer), flagged: out.is_empty() }
        }
        Scorer::ChoiceLetter => match choice_letter(output) {
            Some(c) => Score { correct: answer.trim().eq_ignore_ascii_case(&c.to_string()), flagged: false },
            None => Score { correct: false, flagged: true },
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub accuracy: f64,
    pub correct: Vec<bool>,
    pub flagged: usize,
}

/// Scores one output per task item, in order.
pub fn score(outputs: &[String], task: &TaskSet) -> ScoreReport {
    assert_eq!(outputs.len(), task.len(), "one output per item");
    let scores: Vec<Score> = outputs.iter().zip(task.items()).map(|(o, i)| score_one(o, &i.answer, task.scorer)).collect();
    let correct: Vec<bool> = scores.iter().map(|s| s.correct).collect();
    ScoreReport {
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / outputs.len().max(1) as f64,
        flagged: scores.iter().filter(|s| s.flagged).count(),
        correct,
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mix(seed: u64, item: usize, pos: usize, salt: u64) -> u64 {
    splitmix(splitmix(splitmix(seed ^ salt.rotate_left(17)) ^ item as u64) ^ pos as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub items: usize,
    pub answer_len: usize,
    /// Fraction of answer positions the small model gets wrong.
    pub corruption: f64,
    pub seed: u64,
    pub hidden_dim: usize,
    /// Separation of the correctness signal in the hidden state, in noise
    /// standard deviations.
    pub margin: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams { items: 100, answer_len: 3, corruption: 0.5, seed: 0, hidden_dim: 16, margin: 1.5 }
    }
}

struct OracleData {
    params: OracleParams,
    prompts: Vec<Vec<u8>>,
    answers: Vec<Vec<u8>>,
}

impl OracleData {
    fn corrupted(&self, item: usize, pos: usize) -> bool {
        let u = (mix(self.params.seed, item, pos, 1) >> 11) as f64 / (1u64 << 53) as f64;
        u < self.params.corruption
    }

    fn prediction(&self, item: usize, pos: usize) -> TokenId {
        let answer = &self.answers[item];
        let Some(&truth) = answer.get(pos) else { return EOS };
        if !self.corrupted(item, pos) {
            return TokenId(truth as u32);
        }
        let shift = 1 + mix(self.params.seed, item, pos, 2) % 25;
        let wrong = b'A' + ((truth.wrapping_sub(b'A') as u64 % 26 + shift) % 26) as u8;
        TokenId(wrong as u32)
    }

    fn hidden(&self, item: usize, pos: usize) -> HiddenState {
        let d = self.params.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.params.seed, item, pos, 3));
        let sign = if pos < self.answers[item].len() && self.corrupted(item, pos) { -1.0 } else { 1.0 };
        let shift = sign * self.params.margin / (d as f64).sqrt();
        let v = (0..d).map(|_| StandardNormal.sample(&mut rng)).map(|z: f64| z + shift).collect();
        HiddenState::new(v).expect("finite")
    }

    fn item_of(&self, bytes: &[u8]) -> Option<usize> {
        (0..self.prompts.len()).filter(|&i| bytes.starts_with(&self.prompts[i])).max_by_key(|&i| self.prompts[i].len())
    }

    fn output(&self, item: usize, pos: usize) -> StepOutput {
        let mut logits = vec![0.0; VOCAB_SIZE];
        logits[self.prediction(item, pos).index()] = 10.0;
        StepOutput { logits, hidden: self.hidden(item, pos) }
    }
}

/// Synthetic task with a known-correct large model.
#[derive(Clone)]
pub struct OracleTask {
    data: Arc<OracleData>,
    task: TaskSet,
}

impl OracleTask {
    pub fn new(params: OracleParams) -> Self {
        assert!((0.0..=1.0).contains(&params.corruption), "corruption must lie in [0, 1]");
        assert!(params.items > 0 && params.answer_len > 0 && params.hidden_dim > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut items = Vec::with_capacity(params.items);
        for i in 0..params.items {
            let answer: String = (0..params.answer_len).map(|_| (b'A' + rng.random_range(0..26u8)) as char).collect();
            items.push(TaskItem { prompt: format!("Q{i:04}/{:x}: recall the code word.\nA: ", params.seed), answer });
        }
        let data = OracleData {
            params,
            prompts: items.iter().map(|i| i.prompt.as_bytes().to_vec()).collect(),
            answers: items.iter().map(|i| i.answer.as_bytes().to_vec()).collect(),
        };
        let task = TaskSet::new(items, Scorer::ExactMatch).expect("generated prompts are unique");
        OracleTask { data: Arc::new(data), task }
    }

    pub fn params(&self) -> &OracleParams {
        &self.data.params
    }

    pub fn task(&self) -> &TaskSet {
        &self.task
    }

    pub fn slm(&self) -> OracleSlm {
        OracleSlm { data: self.data.clone() }
    }

    pub fn llm(&self) -> ScriptedOracle {
        ScriptedOracle::new(self.task.items().iter().map(|i| (i.prompt.clone(), i.answer.clone())))
    }

    pub fn is_corrupted(&self, item: usize, pos: usize) -> bool {
        pos < self.data.answers[item].len() && self.data.corrupted(item, pos)
    }

    /// Fraction of answer positions the small model gets wrong.
    pub fn corrupted_fraction(&self) -> f64 {
        let total = self.data.answers.iter().map(Vec::len).sum::<usize>();
        let bad = (0..self.task.len()).map(|i| (0..self.data.answers[i].len()).filter(|&p| self.is_corrupted(i, p)).count()).sum::<usize>();
        bad as f64 / total as f64
    }

    /// Shortcut-labelled examples at every answer position, with the small
    /// model's own greedy output and the oracle's as the two predictions.
    pub fn training_dataset(&self) -> Dataset {
        let mut examples = Vec::new();
        for item in 0..self.task.len() {
            let answer = &self.data.answers[item];
            let prompt_len = self.data.prompts[item].len() + 1;
            for pos in 0..=answer.len() {
                let truth = answer.get(pos).map_or(EOS, |&b| TokenId(b as u32));
                examples.push(TrainingExample {
                    hidden: self.data.hidden(item, pos),
                    label: shortcut_label(self.data.prediction(item, pos), truth, truth),
                    context_len: prompt_len + pos,
                    sequence: item,
                    position: pos,
                });
            }
        }
        Dataset { examples }
    }
}

/// Small model of an [`OracleTask`].
#[derive(Clone)]
pub struct OracleSlm {
    data: Arc<OracleData>,
}

/// Which item the context belongs to and how long it is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleCache {
    item: usize,
    prompt_tokens: usize,
    len: usize,
}

impl Backend for OracleSlm {
    type Cache = OracleCache;

    fn hidden_dim(&self) -> usize {
        self.data.params.hidden_dim
    }

    fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    fn prefill(&self, tokens: &[TokenId]) -> Result<(OracleCache, StepOutput), EngineError> {
        if tokens.is_empty() {
            return Err(EngineError::EmptyInput);
        }
        crate::engine::check_tokens(tokens, VOCAB_SIZE, 0)?;
        let body = if tokens[0] == BOS { &tokens[1..] } else { tokens };
        let bytes = ByteTokenizer.decode_bytes(body);
        let item = self.data.item_of(&bytes).ok_or_else(|| EngineError::Backend("prompt is not part of the oracle task".into()))?;
        let prompt_tokens = tokens.len() - body.len() + self.data.prompts[item].len();
        let cache = OracleCache { item, prompt_tokens, len: tokens.len() };
        let out = self.data.output(item, cache.len - prompt_tokens);
        Ok((cache, out))
    }

    fn decode_step(&self, cache: &mut OracleCache, token: TokenId) -> Result<StepOutput, EngineError> {
        crate::engine::check_tokens(&[token], VOCAB_SIZE, cache.len)?;
        cache.len += 1;
        Ok(self.data.output(cache.item, cache.len - cache.prompt_tokens))
    }

    fn cache_len(&self, cache: &OracleCache) -> usize {
        cache.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub thresholds: Vec<f64>,
    pub template: GenerationConfig,
    /// Run items of one threshold on several threads.
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { thresholds: DEFAULT_GRID.to_vec(), template: GenerationConfig::default(), parallel: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRun {
    pub item: usize,
    pub output: String,
    pub correct: bool,
    pub flagged: bool,
    pub metrics: Option<RequestMetrics>,
    pub error: Option<String>,
    pub events: SessionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// `runs[k]` holds the items of `rows[k]`.
    pub runs: Vec<Vec<ItemRun>>,
}

fn run_item<B: Backend, T: LlmTransport>(
    orch: &Orchestrator<B, T>,
    task: &TaskSet,
    index: usize,
    cfg: &GenerationConfig,
    clock: &dyn Clock,
) -> ItemRun {
    let item = &task.items()[index];
    match orch.generate(&item.prompt, cfg, clock) {
        Ok(GenerationResult { text, events, error, .. }) => {
            let s = score_one(&text, &item.answer, task.scorer);
            let metrics = metrics::compute(&events).ok();
            ItemRun { item: index, output: text, correct: s.correct, flagged: s.flagged, metrics, error, events }
        }
        Err(e) => ItemRun {
            item: index,
            output: String::new(),
            correct: false,
            flagged: true,
            metrics: None,
            error: Some(e.to_string()),
            events: SessionRecord::default(),
        },
    }
}

/// Runs every item at every threshold. `clock` supplies a fresh clock per
/// generation. Failed items are kept (scored wrong) and counted per row.
pub fn sweep<B: Backend, T: LlmTransport>(
    orch: &Orchestrator<B, T>,
    task: &TaskSet,
    cfg: &SweepConfig,
    clock: &(dyn Fn() -> Box<dyn Clock> + Sync),
) -> Result<SweepOutcome, BenchError> {
    if task.is_empty() {
        return Err(BenchError::EmptyTask);
    }
    if cfg.thresholds.windows(2).any(|w| w[0] > w[1]) || cfg.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(BenchError::BadThresholds);
    }
    let workers = if cfg.parallel { std::thread::available_parallelism().map_or(1, |n| n.get()).min(task.len()) } else { 1 };
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &threshold in &cfg.thresholds {
        let gen_cfg = GenerationConfig { threshold, ..cfg.template };
        let item_runs: Vec<ItemRun> = if workers <= 1 {
            (0..task.len()).map(|i| run_item(orch, task, i, &gen_cfg, clock().as_ref())).collect()
        } else {
            let mut slots: Vec<Option<ItemRun>> = vec![None; task.len()];
            std::thread::scope(|s| {
                let chunk = task.len().div_ceil(workers);
                for (w, part) in slots.chunks_mut(chunk).enumerate() {
                    let gen_cfg = &gen_cfg;
                    s.spawn(move || {
                        for (k, slot) in part.iter_mut().enumerate() {
                            *slot = Some(run_item(orch, task, w * chunk + k, gen_cfg, clock().as_ref()));
                        }
                    });
                }
            });
            slots.into_iter().map(|r| r.expect("every slot filled")).collect()
        };
        let measured: Vec<(RequestMetrics, bool)> = item_runs.iter().filter_map(|r| r.metrics.map(|m| (m, r.correct))).collect();
        let metrics: Vec<RequestMetrics> = measured.iter().map(|(m, _)| *m).collect();
        let mut row = match aggregate(&metrics, threshold, None) {
            Ok(row) => row,
            Err(_) => aggregate(&[RequestMetrics::default()], threshold, None).expect("non-empty"),
        };
        row.accuracy = Some(item_runs.iter().filter(|r| r.correct).count() as f64 / item_runs.len() as f64);
        row.requests = item_runs.len();
        row.failed = item_runs.iter().filter(|r| r.error.is_some()).count();
        rows.push(row);
        runs.push(item_runs);
    }
    Ok(SweepOutcome { rows, runs })
}

/// Plain-text summary of a sweep.
pub fn summary(outcome: &SweepOutcome) -> String {
    let mut s = String::from("threshold  routing  routed_ratio  accuracy  slm_s     comm_llm_s  overall_s  residual  failed\n");
    for r in &outcome.rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "{:<9.2}  {:<7.2}  {:<12.4}  {:<8.4}  {:<8.3}  {:<10.3}  {:<9.3}  {:<8.4}  {}\n",
            r.threshold,
            m.routing_number,
            r.routed_ratio,
            r.accuracy.unwrap_or(f64::NAN),
            m.slm_inference_s,
            m.comm_llm_s,
            m.overall_s,
            if m.overall_s > 0.0 { m.residual_s() / m.overall_s } else { 0.0 },
            r.failed
        ));
    }
    s
}

/// Writes `results.csv`, `summary.txt` and one event log per run under `dir`.
pub fn write_outputs(outcome: &SweepOutcome, dir: impl AsRef<Path>) -> Result<(), BenchError> {
    let dir = dir.as_ref();
    let events = dir.join("events");
    std::fs::create_dir_all(&events)?;
    let csv_file = std::fs::File::create(dir.join("results.csv"))?;
    metrics::write_csv(&outcome.rows, csv_file).map_err(|e| BenchError::Io(std::io::Error::other(e)))?;
    std::fs::write(dir.join("summary.txt"), summary(outcome))?;
    for (row, runs) in outcome.rows.iter().zip(&outcome.runs) {
        for run in runs {
            let name = format!("t{:.2}_item{:04}.jsonl", row.threshold, run.item);
            std::fs::write(events.join(name), run.events.to_jsonl())?;
        }
    }
    Ok(())
}
