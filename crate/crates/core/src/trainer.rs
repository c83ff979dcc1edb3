//! Router training from shortcut preference labels.
//!
//! Each decode position of a corpus sequence yields one example: the small
//! model's hidden state and a preference between the two models. The label
//! is assigned by the shortcut rule against the ground-truth next token: the
//! small model is preferred when its greedy prediction is right, otherwise
//! the large model when its prediction is right, otherwise the position needs
//! a full rollout to decide (dropped by default).
//!
//! Training objective: a Bradley-Terry model over the two actions with router
//! score `s = sigmoid(z)` assigns `P(SLM preferred) = s` and
//! `P(LLM preferred) = 1 - s`. With one observed preferred action per example
//! the negative log-likelihood is exactly binary cross-entropy with target 1
//! for "prefer SLM" and 0 for "prefer LLM", which is what [`train`] minimizes
//! (plus an L2 penalty on weight matrices) with plain mini-batch gradient
//! descent.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{greedy_next, Backend, EngineError};
use crate::router::{decide, sigmoid, DeferralPolicy, RouterError, RouterModel};
use crate::tensorfile::{TensorFile, TensorFileError};
use crate::types::{HiddenState, Route, TokenId};

pub const DATASET_KIND: &str = "tokenroute.dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PreferenceLabel {
    PreferSlm,
    PreferLlm,
    NeedsRollout,
}

impl PreferenceLabel {
    fn code(self) -> f64 {
        match self {
            PreferenceLabel::PreferLlm => 0.0,
            PreferenceLabel::PreferSlm => 1.0,
            PreferenceLabel::NeedsRollout => 2.0,
        }
    }

    fn from_code(v: f64) -> Option<Self> {
        match v as i64 {
            0 if v == 0.0 => Some(PreferenceLabel::PreferLlm),
            1 if v == 1.0 => Some(PreferenceLabel::PreferSlm),
            2 if v == 2.0 => Some(PreferenceLabel::NeedsRollout),
            _ => None,
        }
    }

    /// BCE target, `None` for unresolved examples.
    pub fn target(self) -> Option<f64> {
        match self {
            PreferenceLabel::PreferSlm => Some(1.0),
            PreferenceLabel::PreferLlm => Some(0.0),
            PreferenceLabel::NeedsRollout => None,
        }
    }
}

/// SLM is checked first, then LLM.
pub fn shortcut_label(slm_pred: TokenId, llm_pred: TokenId, truth: TokenId) -> PreferenceLabel {
    if slm_pred == truth {
        PreferenceLabel::PreferSlm
    } else if llm_pred == truth {
        PreferenceLabel::PreferLlm
    } else {
        PreferenceLabel::NeedsRollout
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty after dropping rollout-only examples")]
    EmptyDataset,
    #[error("corpus sequence {0} is empty")]
    EmptySequence(usize),
    #[error("example {index} has hidden dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("rounds must be at least 1")]
    NoRounds,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    File(#[from] TensorFileError),
    #[error("malformed dataset file: {0}")]
    MalformedDataset(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub hidden: HiddenState,
    pub label: PreferenceLabel,
    pub context_len: usize,
    pub sequence: usize,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub prefer_slm: usize,
    pub prefer_llm: usize,
    pub needs_rollout: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<TrainingExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn counts(&self) -> LabelCounts {
        let mut c = LabelCounts::default();
        for e in &self.examples {
            match e.label {
                PreferenceLabel::PreferSlm => c.prefer_slm += 1,
                PreferenceLabel::PreferLlm => c.prefer_llm += 1,
                PreferenceLabel::NeedsRollout => c.needs_rollout += 1,
            }
        }
        c
    }

    /// Examples with a resolved preference, order preserved.
    pub fn retained(&self) -> Dataset {
        Dataset { examples: self.examples.iter().filter(|e| e.label != PreferenceLabel::NeedsRollout).cloned().collect() }
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile, TrainError> {
        let d = self.examples.first().map_or(0, |e| e.hidden.dim());
        let n = self.examples.len();
        let mut hidden = Vec::with_capacity(n * d);
        for (index, e) in self.examples.iter().enumerate() {
            if e.hidden.dim() != d {
                return Err(TrainError::DimensionMismatch { index, expected: d, got: e.hidden.dim() });
            }
            hidden.extend_from_slice(e.hidden.as_slice());
        }
        let col = |f: &dyn Fn(&TrainingExample) -> f64| self.examples.iter().map(f).collect::<Vec<_>>();
        let meta = serde_json::json!({ "hidden_dim": d, "examples": n, "labels": {"0": "PreferLLM", "1": "PreferSLM", "2": "NeedsRollout"} });
        let mut f = TensorFile::new(DATASET_KIND, meta);
        f.push("hidden", vec![n, d], hidden)?;
        f.push("label", vec![n], col(&|e| e.label.code()))?;
        f.push("context_len", vec![n], col(&|e| e.context_len as f64))?;
        f.push("sequence", vec![n], col(&|e| e.sequence as f64))?;
        f.push("position", vec![n], col(&|e| e.position as f64))?;
        Ok(f)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self, TrainError> {
        f.expect_kind(DATASET_KIND)?;
        let d = f.meta["hidden_dim"].as_u64().ok_or_else(|| TrainError::MalformedDataset("hidden_dim".into()))? as usize;
        let n = f.meta["examples"].as_u64().ok_or_else(|| TrainError::MalformedDataset("examples".into()))? as usize;
        let hidden = f.expect("hidden", &[n, d])?;
        let label = f.expect("label", &[n])?;
        let ctx = f.expect("context_len", &[n])?;
        let seq = f.expect("sequence", &[n])?;
        let pos = f.expect("position", &[n])?;
        let mut examples = Vec::with_capacity(n);
        for i in 0..n {
            let h = if d == 0 { Vec::new() } else { hidden[i * d..(i + 1) * d].to_vec() };
            examples.push(TrainingExample {
                hidden: HiddenState::new(h).map_err(|e| TrainError::MalformedDataset(e.to_string()))?,
                label: PreferenceLabel::from_code(label[i])
                    .ok_or_else(|| TrainError::MalformedDataset(format!("label code {}", label[i])))?,
                context_len: ctx[i] as usize,
                sequence: seq[i] as usize,
                position: pos[i] as usize,
            });
        }
        Ok(Dataset { examples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        Ok(self.to_tensor_file()?.write(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}

/// Anything that predicts the next token of a context: the large model in
/// the labelling pipeline.
pub trait NextTokenOracle: Send + Sync {
    fn predict(&self, context: &[TokenId]) -> Result<TokenId, EngineError>;

    /// `out[i]` is the prediction after `seq[..=i]`.
    fn predict_along(&self, seq: &[TokenId]) -> Result<Vec<TokenId>, EngineError> {
        (1..=seq.len()).map(|i| self.predict(&seq[..i])).collect()
    }
}

/// Greedy decoding of a [`Backend`] as a next-token oracle.
#[derive(Debug, Clone)]
pub struct GreedyOracle<B>(pub B);

impl<B: Backend> NextTokenOracle for GreedyOracle<B> {
    fn predict(&self, context: &[TokenId]) -> Result<TokenId, EngineError> {
        Ok(greedy_next(&self.0.prefill(context)?.1.logits))
    }

    fn predict_along(&self, seq: &[TokenId]) -> Result<Vec<TokenId>, EngineError> {
        if seq.is_empty() {
            return Ok(Vec::new());
        }
        let (mut cache, mut out) = self.0.prefill(&seq[..1])?;
        let mut preds = vec![greedy_next(&out.logits)];
        for &t in &seq[1..] {
            out = self.0.decode_step(&mut cache, t)?;
            preds.push(greedy_next(&out.logits));
        }
        Ok(preds)
    }
}

/// How iterative rounds obtain their decode contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    /// Teacher-forced corpus contexts, identical every round.
    #[default]
    Fixed,
    /// Contexts continue with the token the current router would pick
    /// (SLM greedy or LLM prediction); labels still use the corpus token at
    /// the same position.
    OnPolicy,
}

/// One position of a recorded labelling trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub sequence: usize,
    pub position: usize,
    pub confidence: Option<f64>,
    pub route: Route,
    pub next_token: TokenId,
}

pub struct DatasetBuilder<'a, B: Backend> {
    pub slm: &'a B,
    pub llm: &'a dyn NextTokenOracle,
    /// Resolve NeedsRollout examples by comparing greedy rollouts of this
    /// many tokens. `None` keeps them unresolved.
    pub rollout_horizon: Option<usize>,
}

impl<'a, B: Backend> DatasetBuilder<'a, B> {
    pub fn new(slm: &'a B, llm: &'a dyn NextTokenOracle) -> Self {
        Self { slm, llm, rollout_horizon: None }
    }

    /// One example per decode position of every sequence, teacher-forced on
    /// the corpus tokens. Sequences of length 1 contribute nothing.
    pub fn build(&self, corpus: &[Vec<TokenId>]) -> Result<Dataset, TrainError> {
        Ok(self.build_traced(corpus, None)?.0)
    }

    /// As [`build`](Self::build), also recording what `router` would decide
    /// at each position.
    pub fn build_traced(
        &self,
        corpus: &[Vec<TokenId>],
        router: Option<(&RouterModel, DeferralPolicy)>,
    ) -> Result<(Dataset, Vec<TraceStep>), TrainError> {
        let mut examples = Vec::new();
        let mut trace = Vec::new();
        for (s, seq) in corpus.iter().enumerate() {
            if seq.is_empty() {
                return Err(TrainError::EmptySequence(s));
            }
            let llm_preds = self.llm.predict_along(seq)?;
            let (mut cache, mut out) = self.slm.prefill(&seq[..1])?;
            for i in 1..seq.len() {
                let slm_pred = greedy_next(&out.logits);
                let mut label = shortcut_label(slm_pred, llm_preds[i - 1], seq[i]);
                if label == PreferenceLabel::NeedsRollout {
                    if let Some(h) = self.rollout_horizon {
                        label = self.rollout_label(seq, i, slm_pred, llm_preds[i - 1], h)?;
                    }
                }
                let (confidence, route) = match router {
                    Some((r, policy)) => {
                        let c = r.score(&out.hidden)?;
                        (Some(c), decide(c, policy))
                    }
                    None => (None, Route::Slm),
                };
                trace.push(TraceStep { sequence: s, position: i, confidence, route, next_token: seq[i] });
                examples.push(TrainingExample { hidden: out.hidden.clone(), label, context_len: i, sequence: s, position: i });
                if i + 1 < seq.len() {
                    out = self.slm.decode_step(&mut cache, seq[i])?;
                }
            }
        }
        Ok((Dataset { examples }, trace))
    }

    /// Contexts follow the mixed policy: at each position the router picks
    /// which model's greedy token extends the context.
    pub fn build_on_policy(
        &self,
        corpus: &[Vec<TokenId>],
        prompt_len: usize,
        router: Option<(&RouterModel, DeferralPolicy)>,
    ) -> Result<(Dataset, Vec<TraceStep>), TrainError> {
        let mut examples = Vec::new();
        let mut trace = Vec::new();
        for (s, seq) in corpus.iter().enumerate() {
            if seq.is_empty() {
                return Err(TrainError::EmptySequence(s));
            }
            let start = prompt_len.clamp(1, seq.len());
            let mut context = seq[..start].to_vec();
            let (mut cache, mut out) = self.slm.prefill(&context)?;
            for i in start..seq.len() {
                let slm_pred = greedy_next(&out.logits);
                let llm_pred = self.llm.predict(&context)?;
                let mut label = shortcut_label(slm_pred, llm_pred, seq[i]);
                if label == PreferenceLabel::NeedsRollout {
                    if let Some(h) = self.rollout_horizon {
                        label = self.rollout_label(seq, i, slm_pred, llm_pred, h)?;
                    }
                }
                let (confidence, route) = match router {
                    Some((r, policy)) => {
                        let c = r.score(&out.hidden)?;
                        (Some(c), decide(c, policy))
                    }
                    None => (None, Route::Slm),
                };
                let next = if route == Route::Llm { llm_pred } else { slm_pred };
                trace.push(TraceStep { sequence: s, position: i, confidence, route, next_token: next });
                examples.push(TrainingExample { hidden: out.hidden.clone(), label, context_len: i, sequence: s, position: i });
                context.push(next);
                if i + 1 < seq.len() {
                    out = self.slm.decode_step(&mut cache, next)?;
                }
            }
        }
        Ok((Dataset { examples }, trace))
    }

    /// Rollout hook: continue greedily with the small model after taking
    /// either model's token at `pos`, and prefer whichever continuation
    /// matches more of the ground truth (ties go to the small model).
    fn rollout_label(
        &self,
        seq: &[TokenId],
        pos: usize,
        slm_pred: TokenId,
        llm_pred: TokenId,
        horizon: usize,
    ) -> Result<PreferenceLabel, TrainError> {
        let end = (pos + horizon).min(seq.len());
        let truth = &seq[pos..end];
        let rollout = |first: TokenId| -> Result<usize, TrainError> {
            let mut ctx = seq[..pos].to_vec();
            ctx.push(first);
            let (mut cache, mut out) = self.slm.prefill(&ctx)?;
            let mut produced = vec![first];
            while produced.len() < truth.len() {
                let t = greedy_next(&out.logits);
                produced.push(t);
                if produced.len() < truth.len() {
                    out = self.slm.decode_step(&mut cache, t)?;
                }
            }
            Ok(produced.iter().zip(truth).filter(|(a, b)| a == b).count())
        };
        let (slm_score, llm_score) = (rollout(slm_pred)?, rollout(llm_pred)?);
        Ok(if llm_score > slm_score { PreferenceLabel::PreferLlm } else { PreferenceLabel::PreferSlm })
    }
}

/// Teacher-forced dataset with unresolved positions kept.
pub fn build_dataset<B: Backend>(
    slm: &B,
    llm: &dyn NextTokenOracle,
    corpus: &[Vec<TokenId>],
) -> Result<Dataset, TrainError> {
    DatasetBuilder::new(slm, llm).build(corpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2_penalty: f64,
    /// Width of the hidden layer; `None` for `d / 2`.
    pub hidden_units: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-2, epochs: 200, batch_size: 32, seed: 0, l2_penalty: 1e-4, hidden_units: None }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.l2_penalty >= 0.0) {
            return Err(TrainError::InvalidConfig("l2_penalty must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub counts: LabelCounts,
    pub train_accuracy: f64,
    /// Only one preference class was present; the router saturates and its
    /// calibration is meaningless.
    pub single_class: bool,
}

/// Per-example forward activations kept for backprop.
struct Forward {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

fn forward(model: &RouterModel, x: &[f64]) -> Forward {
    let last = model.layers().len() - 1;
    let mut inputs = Vec::with_capacity(model.layers().len());
    let mut pre = Vec::with_capacity(model.layers().len());
    let mut a = x.to_vec();
    for (i, l) in model.layers().iter().enumerate() {
        let z = l.forward(&a);
        inputs.push(a);
        a = if i < last { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
        pre.push(z);
    }
    Forward { inputs, pre }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn l2_term(model: &RouterModel, l2: f64) -> f64 {
    0.5 * l2 * model.layers().iter().flat_map(|l| &l.weights).map(|w| w * w).sum::<f64>()
}

/// Mean binary cross-entropy (from logits) plus `l2/2 * ||W||^2`.
pub fn loss(model: &RouterModel, xs: &[&[f64]], ys: &[f64], l2: f64) -> Result<f64, RouterError> {
    let mut total = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let z = model.logit(x)?;
        total += softplus(z) - y * z;
    }
    Ok(total / xs.len() as f64 + l2_term(model, l2))
}

/// Loss and its gradient, flattened in [`RouterModel::params`] order.
pub fn loss_and_gradient(model: &RouterModel, xs: &[&[f64]], ys: &[f64], l2: f64) -> Result<(f64, Vec<f64>), RouterError> {
    let layers = model.layers();
    let mut grad_w: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.weights.len()]).collect();
    let mut grad_b: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.bias.len()]).collect();
    let n = xs.len() as f64;
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        if x.len() != model.input_dim() {
            return Err(RouterError::DimensionMismatch { expected: model.input_dim(), got: x.len() });
        }
        let f = forward(model, x);
        let z = f.pre.last().unwrap()[0];
        total += softplus(z) - y * z;
        let mut delta = vec![(sigmoid(z) - y) / n];
        for li in (0..layers.len()).rev() {
            let l = &layers[li];
            let input = &f.inputs[li];
            for (o, d) in delta.iter().enumerate() {
                grad_b[li][o] += d;
                let row = &mut grad_w[li][o * l.inputs..(o + 1) * l.inputs];
                for (g, xi) in row.iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            if li > 0 {
                let prev_pre = &f.pre[li - 1];
                delta = (0..l.inputs)
                    .map(|i| {
                        if prev_pre[i] <= 0.0 {
                            0.0
                        } else {
                            delta.iter().enumerate().map(|(o, d)| d * l.weights[o * l.inputs + i]).sum()
                        }
                    })
                    .collect();
            }
        }
    }
    let mut grad = Vec::with_capacity(model.num_params());
    for (li, l) in layers.iter().enumerate() {
        grad.extend(grad_w[li].iter().zip(&l.weights).map(|(g, w)| g + l2 * w));
        grad.extend_from_slice(&grad_b[li]);
    }
    Ok((total / n + l2_term(model, l2), grad))
}

fn training_arrays(dataset: &Dataset) -> Result<(Vec<&[f64]>, Vec<f64>, usize), TrainError> {
    let retained: Vec<&TrainingExample> =
        dataset.examples.iter().filter(|e| e.label != PreferenceLabel::NeedsRollout).collect();
    let Some(first) = retained.first() else {
        return Err(TrainError::EmptyDataset);
    };
    let d = first.hidden.dim();
    let mut xs = Vec::with_capacity(retained.len());
    let mut ys = Vec::with_capacity(retained.len());
    for (index, e) in retained.iter().enumerate() {
        if e.hidden.dim() != d {
            return Err(TrainError::DimensionMismatch { index, expected: d, got: e.hidden.dim() });
        }
        xs.push(e.hidden.as_slice());
        ys.push(e.label.target().unwrap());
    }
    Ok((xs, ys, d))
}

/// Fraction of resolved examples where `score >= 0.5` agrees with "prefer SLM".
pub fn accuracy(model: &RouterModel, dataset: &Dataset) -> Result<f64, TrainError> {
    let (xs, ys, _) = training_arrays(dataset)?;
    let mut hits = 0usize;
    for (x, y) in xs.iter().zip(&ys) {
        let slm = model.score_slice(x)? >= 0.5;
        if slm == (*y == 1.0) {
            hits += 1;
        }
    }
    Ok(hits as f64 / xs.len() as f64)
}

/// Trains a fresh `[d, h, 1]` router initialized from `cfg.seed`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(RouterModel, TrainReport), TrainError> {
    cfg.validate()?;
    let (_, _, d) = training_arrays(dataset)?;
    let dims = match cfg.hidden_units {
        Some(h) => vec![d, h, 1],
        None => RouterModel::default_dims(d),
    };
    let model = RouterModel::init(&dims, cfg.seed)?;
    train_from(model, dataset, cfg)
}

/// Continues training an existing router.
pub fn train_from(mut model: RouterModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<(RouterModel, TrainReport), TrainError> {
    cfg.validate()?;
    let (xs, ys, d) = training_arrays(dataset)?;
    if d != model.input_dim() {
        return Err(TrainError::DimensionMismatch { index: 0, expected: model.input_dim(), got: d });
    }
    let counts = dataset.counts();
    let single_class = counts.prefer_slm == 0 || counts.prefer_llm == 0;
    if single_class {
        log::warn!("router training data has a single preference class ({counts:?}); calibration is meaningless");
    }
    let initial_loss = loss(&model, &xs, &ys, cfg.l2_penalty)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut params = model.params();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let bx: Vec<&[f64]> = batch.iter().map(|&i| xs[i]).collect();
            let by: Vec<f64> = batch.iter().map(|&i| ys[i]).collect();
            let (_, grad) = loss_and_gradient(&model, &bx, &by, cfg.l2_penalty)?;
            params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= cfg.learning_rate * g);
            model.set_params(&params)?;
        }
    }
    if model.layers().iter().any(|l| l.weights.iter().chain(&l.bias).any(|v| !v.is_finite())) {
        return Err(TrainError::Router(RouterError::NonFinite));
    }
    let final_loss = loss(&model, &xs, &ys, cfg.l2_penalty)?;
    let train_accuracy = accuracy(&model, dataset)?;
    Ok((model, TrainReport { initial_loss, final_loss, counts, train_accuracy, single_class }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterateConfig {
    pub rounds: usize,
    pub trace_mode: TraceMode,
    /// Routing threshold used when the current router drives decisions.
    pub threshold: f64,
    /// Leading corpus tokens treated as prompt in on-policy mode.
    pub prompt_len: usize,
    pub train: TrainConfig,
}

impl Default for IterateConfig {
    fn default() -> Self {
        Self { rounds: 1, trace_mode: TraceMode::Fixed, threshold: 0.5, prompt_len: 1, train: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub examples: usize,
    pub counts: LabelCounts,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct IterateOutcome {
    pub model: RouterModel,
    pub rounds: Vec<RoundReport>,
    pub datasets: Vec<Dataset>,
    pub traces: Vec<Vec<TraceStep>>,
}

/// Alternates dataset collection under the current router with training.
/// Round 1 starts from a fresh router; later rounds warm-start from the
/// previous round's model.
pub fn iterate<B: Backend>(
    builder: &DatasetBuilder<'_, B>,
    corpus: &[Vec<TokenId>],
    validation: Option<&Dataset>,
    cfg: &IterateConfig,
) -> Result<IterateOutcome, TrainError> {
    if cfg.rounds == 0 {
        return Err(TrainError::NoRounds);
    }
    let policy = DeferralPolicy::CiterThreshold(cfg.threshold);
    let mut model: Option<RouterModel> = None;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut datasets = Vec::with_capacity(cfg.rounds);
    let mut traces = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let router = model.as_ref().map(|m| (m, policy));
        let (dataset, trace) = match cfg.trace_mode {
            TraceMode::Fixed => builder.build_traced(corpus, router)?,
            TraceMode::OnPolicy => builder.build_on_policy(corpus, cfg.prompt_len, router)?,
        };
        let (trained, report) = match model.take() {
            None => train(&dataset, &cfg.train)?,
            Some(prev) => train_from(prev, &dataset, &cfg.train)?,
        };
        let validation_accuracy = accuracy(&trained, validation.unwrap_or(&dataset))?;
        rounds.push(RoundReport {
            round,
            examples: dataset.len(),
            counts: report.counts,
            train_loss: report.final_loss,
            train_accuracy: report.train_accuracy,
            validation_accuracy,
        });
        datasets.push(dataset);
        traces.push(trace);
        model = Some(trained);
    }
    Ok(IterateOutcome { model: model.expect("at least one round"), rounds, datasets, traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ByteTokenizer, ModelConfig, ModelWeights, TinyTransformer, BOS};

    #[test]
    fn shortcut_rule_cases() {
        let t = TokenId(7);
        assert_eq!(shortcut_label(t, TokenId(1), t), PreferenceLabel::PreferSlm);
        assert_eq!(shortcut_label(t, t, t), PreferenceLabel::PreferSlm);
        assert_eq!(shortcut_label(TokenId(2), t, t), PreferenceLabel::PreferLlm);
        assert_eq!(shortcut_label(TokenId(2), TokenId(3), t), PreferenceLabel::NeedsRollout);
    }

    fn blob_dataset(n: usize, label: PreferenceLabel, center: f64) -> Vec<TrainingExample> {
        (0..n)
            .map(|i| TrainingExample {
                hidden: HiddenState::new(vec![center + (i % 7) as f64 * 0.01, -center]).unwrap(),
                label,
                context_len: i,
                sequence: 0,
                position: i,
            })
            .collect()
    }

    #[test]
    fn one_class_saturates_above_half() {
        let ds = Dataset { examples: blob_dataset(40, PreferenceLabel::PreferSlm, 1.0) };
        let (model, report) = train(&ds, &TrainConfig { epochs: 50, ..TrainConfig::default() }).unwrap();
        assert!(report.single_class);
        for e in &ds.examples {
            assert!(model.score(&e.hidden).unwrap() > 0.5);
        }
    }

    #[test]
    fn loss_does_not_increase() {
        let mut ex = blob_dataset(30, PreferenceLabel::PreferSlm, 1.0);
        ex.extend(blob_dataset(30, PreferenceLabel::PreferLlm, -1.0));
        let (_, report) = train(&Dataset { examples: ex }, &TrainConfig { epochs: 30, ..TrainConfig::default() }).unwrap();
        assert!(report.final_loss <= report.initial_loss);
        assert!(!report.single_class);
    }

    #[test]
    fn empty_after_dropping_rollouts_is_an_error() {
        let ds = Dataset { examples: blob_dataset(3, PreferenceLabel::NeedsRollout, 0.0) };
        assert!(matches!(train(&ds, &TrainConfig::default()), Err(TrainError::EmptyDataset)));
        assert!(matches!(train(&Dataset::default(), &TrainConfig::default()), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn training_is_reproducible() {
        let mut ex = blob_dataset(20, PreferenceLabel::PreferSlm, 0.5);
        ex.extend(blob_dataset(20, PreferenceLabel::PreferLlm, -0.5));
        let ds = Dataset { examples: ex };
        let cfg = TrainConfig { epochs: 10, seed: 42, ..TrainConfig::default() };
        let (a, _) = train(&ds, &cfg).unwrap();
        let (b, _) = train(&ds, &cfg).unwrap();
        let bits = |m: &RouterModel| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn retained_preserves_labels() {
        let mut ex = blob_dataset(3, PreferenceLabel::PreferSlm, 0.0);
        ex.extend(blob_dataset(2, PreferenceLabel::NeedsRollout, 0.0));
        ex.extend(blob_dataset(3, PreferenceLabel::PreferLlm, 0.0));
        let ds = Dataset { examples: ex };
        let kept = ds.retained();
        assert_eq!(kept.len(), 6);
        let expected: Vec<_> = ds.examples.iter().filter(|e| e.label != PreferenceLabel::NeedsRollout).cloned().collect();
        assert_eq!(kept.examples, expected);
    }

    #[test]
    fn dataset_file_round_trip() {
        let mut ex = blob_dataset(3, PreferenceLabel::PreferSlm, 0.25);
        ex.extend(blob_dataset(2, PreferenceLabel::NeedsRollout, 0.5));
        let ds = Dataset { examples: ex };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.trt");
        ds.save(&p).unwrap();
        assert_eq!(Dataset::load(&p).unwrap(), ds);
    }

    #[test]
    fn one_example_per_decode_position() {
        let slm = TinyTransformer::new(ModelWeights::random(ModelConfig { max_seq_len: 64, ..ModelConfig::reference(1) }).unwrap());
        let llm = GreedyOracle(TinyTransformer::new(
            ModelWeights::random(ModelConfig { max_seq_len: 64, ..ModelConfig::reference(2) }).unwrap(),
        ));
        let corpus = vec![ByteTokenizer.encode_with_bos("abcde"), ByteTokenizer.encode_with_bos("xy"), vec![BOS]];
        let ds = build_dataset(&slm, &llm, &corpus).unwrap();
        assert_eq!(ds.len(), 5 + 2);
        assert!(ds.examples.iter().all(|e| e.hidden.dim() == 64));
        assert_eq!(ds.examples[0].context_len, 1);
        assert!(matches!(build_dataset(&slm, &llm, &[vec![]]), Err(TrainError::EmptySequence(0))));
    }

    #[test]
    fn rollout_hook_resolves_every_example() {
        let slm = TinyTransformer::new(ModelWeights::random(ModelConfig { max_seq_len: 64, ..ModelConfig::reference(1) }).unwrap());
        let llm = GreedyOracle(TinyTransformer::new(
            ModelWeights::random(ModelConfig { max_seq_len: 64, ..ModelConfig::reference(2) }).unwrap(),
        ));
        let corpus = vec![ByteTokenizer.encode_with_bos("rollouts decide")];
        let plain = build_dataset(&slm, &llm, &corpus).unwrap();
        let builder = DatasetBuilder { rollout_horizon: Some(4), ..DatasetBuilder::new(&slm, &llm) };
        let resolved = builder.build(&corpus).unwrap();
        assert_eq!(resolved.counts().needs_rollout, 0);
        for (a, b) in plain.examples.iter().zip(&resolved.examples) {
            if a.label != PreferenceLabel::NeedsRollout {
                assert_eq!(a.label, b.label);
            }
        }
    }
}
