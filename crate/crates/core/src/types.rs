//! Domain vocabulary shared by every module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into the active tokenizer's vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which model produced (or should produce) a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    #[serde(rename = "SLM")]
    Slm,
    #[serde(rename = "LLM")]
    Llm,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Slm => "SLM",
            Route::Llm => "LLM",
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown route {0:?}, expected \"SLM\" or \"LLM\"")]
pub struct ParseRouteError(pub String);

impl FromStr for Route {
    type Err = ParseRouteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SLM" => Ok(Route::Slm),
            "LLM" => Ok(Route::Llm),
            other => Err(ParseRouteError(other.to_string())),
        }
    }
}

/// Last-layer hidden vector at the current decode position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct HiddenState(Vec<f64>);

#[derive(Debug, Clone, PartialEq, Error)]
#[error("hidden state entry {index} is not finite ({value})")]
pub struct NonFiniteHidden {
    pub index: usize,
    pub value: f64,
}

impl HiddenState {
    pub fn new(values: Vec<f64>) -> Result<Self, NonFiniteHidden> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(NonFiniteHidden { index, value });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for HiddenState {
    type Error = NonFiniteHidden;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<HiddenState> for Vec<f64> {
    fn from(h: HiddenState) -> Self {
        h.0
    }
}

/// A generated token together with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedToken {
    pub token: TokenId,
    /// UTF-8 text this token completes. Empty while a multi-byte character is
    /// still pending.
    pub text: String,
    pub source: Route,
    /// Router confidence; `None` when the router was not consulted for this
    /// token (small-only mode, or trailing tokens of a multi-token LLM burst).
    pub confidence: Option<f64>,
    /// Monotonic seconds since the start of the generation.
    pub emitted_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Joint,
    SmallOnly,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Mode::Joint),
            "small_only" | "small-only" => Ok(Mode::SmallOnly),
            other => Err(format!("unknown mode {other:?} (expected joint or small_only)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Joint => "joint",
            Mode::SmallOnly => "small_only",
        })
    }
}

/// How the small model's KV cache is reconciled after LLM tokens arrive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvPolicy {
    /// Decode-step the received tokens into the existing cache.
    Incremental,
    /// Drop the cache and prefill the full transcript again.
    RePrefillOnRoute,
}

impl FromStr for KvPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "incremental" => Ok(KvPolicy::Incremental),
            "reprefill" | "re_prefill_on_route" | "re-prefill" => Ok(KvPolicy::RePrefillOnRoute),
            other => Err(format!("unknown kv policy {other:?} (expected incremental or reprefill)")),
        }
    }
}

/// Token selection rule. Only greedy decoding carries correctness guarantees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampling {
    #[default]
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub mode: Mode,
    pub threshold: f64,
    pub max_tokens: usize,
    pub llm_burst: usize,
    pub kv_policy: KvPolicy,
    pub stream: bool,
    #[serde(default)]
    pub sampling: Sampling,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Joint,
            threshold: 0.7,
            max_tokens: 100,
            llm_burst: 1,
            kv_policy: KvPolicy::Incremental,
            stream: false,
            sampling: Sampling::Greedy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{field} must lie in [0, 1], got {value}")]
    ThresholdOutOfRange { field: &'static str, value: f64 },
    #[error("{field} must be at least 1")]
    NonPositiveMaxTokens { field: &'static str },
    #[error("{field} must be at least 1")]
    NonPositiveBurst { field: &'static str },
    #[error("{field} must be positive and finite, got {value}")]
    InvalidTemperature { field: &'static str, value: f64 },
}

impl GenerationConfig {
    /// Checks every invariant, returning the config unchanged when it holds.
    pub fn validate(self) -> Result<Self, ConfigError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ConfigError::ThresholdOutOfRange { field: "threshold", value: self.threshold });
        }
        if self.max_tokens == 0 {
            return Err(ConfigError::NonPositiveMaxTokens { field: "max_tokens" });
        }
        if self.llm_burst == 0 {
            return Err(ConfigError::NonPositiveBurst { field: "llm_burst" });
        }
        if let Sampling::Temperature { temperature, .. } = self.sampling {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(ConfigError::InvalidTemperature { field: "sampling.temperature", value: temperature });
            }
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: Mode, threshold: f64, max_tokens: usize, burst: usize, kv: KvPolicy, stream: bool) -> GenerationConfig {
        GenerationConfig { mode, threshold, max_tokens, llm_burst: burst, kv_policy: kv, stream, sampling: Sampling::Greedy }
    }

    #[test]
    fn accepts_typical_joint_config() {
        let c = cfg(Mode::Joint, 0.7, 100, 1, KvPolicy::Incremental, false);
        assert_eq!(c.validate(), Ok(c));
    }

    #[test]
    fn rejects_threshold_above_one() {
        let err = cfg(Mode::Joint, 1.5, 100, 1, KvPolicy::Incremental, false).validate().unwrap_err();
        assert_eq!(err, ConfigError::ThresholdOutOfRange { field: "threshold", value: 1.5 });
        assert!(err.to_string().contains("threshold"));
    }

    #[test]
    fn rejects_nan_threshold() {
        let err = cfg(Mode::Joint, f64::NAN, 100, 1, KvPolicy::Incremental, false).validate();
        assert!(matches!(err, Err(ConfigError::ThresholdOutOfRange { .. })));
    }

    #[test]
    fn accepts_minimal_config() {
        let c = cfg(Mode::SmallOnly, 0.0, 1, 1, KvPolicy::RePrefillOnRoute, true);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn zero_counts_name_their_field() {
        let e = cfg(Mode::Joint, 0.5, 0, 1, KvPolicy::Incremental, false).validate().unwrap_err();
        assert_eq!(e, ConfigError::NonPositiveMaxTokens { field: "max_tokens" });
        let e = cfg(Mode::Joint, 0.5, 1, 0, KvPolicy::Incremental, false).validate().unwrap_err();
        assert_eq!(e, ConfigError::NonPositiveBurst { field: "llm_burst" });
    }

    #[test]
    fn route_strings_round_trip() {
        for r in [Route::Slm, Route::Llm] {
            assert_eq!(r.to_string().parse::<Route>().unwrap(), r);
            let json = serde_json::to_string(&r).unwrap();
            assert_eq!(serde_json::from_str::<Route>(&json).unwrap(), r);
        }
        assert_eq!(serde_json::to_string(&Route::Llm).unwrap(), "\"LLM\"");
        assert!("llm".parse::<Route>().is_err());
    }

    #[test]
    fn hidden_state_rejects_non_finite() {
        assert!(HiddenState::new(vec![0.0, f64::INFINITY]).is_err());
        assert_eq!(HiddenState::new(vec![1.0, 2.0]).unwrap().dim(), 2);
    }

    proptest::proptest! {
        #[test]
        fn validate_is_idempotent(threshold in -0.5f64..1.5, max_tokens in 0usize..300, burst in 0usize..4, joint: bool) {
            let mode = if joint { Mode::Joint } else { Mode::SmallOnly };
            let c = cfg(mode, threshold, max_tokens, burst, KvPolicy::Incremental, false);
            if let Ok(v) = c.validate() {
                proptest::prop_assert_eq!(v.validate(), Ok(v));
            }
        }
    }
}
