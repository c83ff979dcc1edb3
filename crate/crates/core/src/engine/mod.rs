//! Small-model inference.
//!
//! [`Backend`] is the contract any model runtime must satisfy to take part in
//! routing: batched prefill, single-token decode against a session-private
//! cache, and a [`StepOutput`] that always carries the last-layer hidden state
//! next to the logits. The router reads nothing else.

mod model;
pub mod tokenizer;
mod weights;

use rand::Rng;
use thiserror::Error;

pub use model::{KvCache, TinyTransformer};
pub use tokenizer::{ByteTokenizer, IncrementalDecoder, BOS, EOS, VOCAB_SIZE};
pub use weights::{LayerNormWeights, LayerWeights, ModelConfig, ModelWeights, MODEL_KIND, SUPPRESSED_BIAS};

use crate::tensorfile::TensorFileError;
use crate::types::{HiddenState, TokenId};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("empty input")]
    EmptyInput,
    #[error("token {id} at position {position} is outside the vocabulary")]
    TokenOutOfVocab { position: usize, id: TokenId },
    #[error("context exceeds the model's maximum of {max_seq_len} positions")]
    ContextOverflow { max_seq_len: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    File(#[from] TensorFileError),
    #[error("backend failure: {0}")]
    Backend(String),
}

/// Output of one forward position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub hidden: HiddenState,
}

pub trait Backend: Send + Sync {
    type Cache: Clone + Send;

    fn hidden_dim(&self) -> usize;
    fn vocab_size(&self) -> usize;

    /// Processes `tokens` from an empty cache; output is for the last position.
    fn prefill(&self, tokens: &[TokenId]) -> Result<(Self::Cache, StepOutput), EngineError>;

    /// Appends one token. On error the cache is left untouched.
    fn decode_step(&self, cache: &mut Self::Cache, token: TokenId) -> Result<StepOutput, EngineError>;

    fn cache_len(&self, cache: &Self::Cache) -> usize;
}

impl<B: Backend + ?Sized> Backend for &B {
    type Cache = B::Cache;

    fn hidden_dim(&self) -> usize {
        (**self).hidden_dim()
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn prefill(&self, tokens: &[TokenId]) -> Result<(Self::Cache, StepOutput), EngineError> {
        (**self).prefill(tokens)
    }
    fn decode_step(&self, cache: &mut Self::Cache, token: TokenId) -> Result<StepOutput, EngineError> {
        (**self).decode_step(cache, token)
    }
    fn cache_len(&self, cache: &Self::Cache) -> usize {
        (**self).cache_len(cache)
    }
}

/// Smallest index achieving the maximum logit.
pub fn greedy_next(logits: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    TokenId(best as u32)
}

/// Samples from `softmax(logits / temperature)`.
pub fn sample_with_temperature<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> TokenId {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return TokenId(i as u32);
        }
        u -= w;
    }
    greedy_next(logits)
}

pub(crate) fn check_tokens(tokens: &[TokenId], vocab: usize, offset: usize) -> Result<(), EngineError> {
    match tokens.iter().position(|t| t.index() >= vocab) {
        Some(i) => Err(EngineError::TokenOutOfVocab { position: offset + i, id: tokens[i] }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn greedy_breaks_ties_to_smallest_index() {
        assert_eq!(greedy_next(&[0.0, 3.0, 3.0]), TokenId(1));
        assert_eq!(greedy_next(&[5.0, 1.0, 0.0]), TokenId(0));
    }

    #[test]
    fn greedy_on_one_hot_is_identity() {
        for k in 0..VOCAB_SIZE {
            let mut logits = vec![0.0; VOCAB_SIZE];
            logits[k] = 1.0;
            assert_eq!(greedy_next(&logits), TokenId(k as u32));
        }
    }

    #[test]
    fn low_temperature_sampling_matches_greedy() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let logits = [0.1, 2.0, 0.3];
        for _ in 0..20 {
            assert_eq!(sample_with_temperature(&logits, 1e-3, &mut rng), TokenId(1));
        }
    }
}
