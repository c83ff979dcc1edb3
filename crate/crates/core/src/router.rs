//! Confidence scoring and routing decisions.
//!
//! The router is an MLP over the small model's last-layer hidden state at the
//! current position. Hidden layers use a rectifier, the output a sigmoid, so
//! the score reads as "probability that the small model's token suffices".
//! A token goes to the large model iff its confidence is strictly below the
//! threshold.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorfile::{TensorFile, TensorFileError};
use crate::types::{HiddenState, Route};

pub const ROUTER_KIND: &str = "tokenroute.router";

/// Keeps scores strictly inside (0, 1) even when the sigmoid saturates.
const SCORE_EPS: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid router shape: {0}")]
    InvalidShape(String),
    #[error("router parameters must be finite")]
    NonFinite,
    #[error(transparent)]
    File(#[from] TensorFileError),
}

/// Fully connected layer, weights row-major `[outputs, inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    pub(crate) fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterModel {
    layers: Vec<DenseLayer>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl RouterModel {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, RouterError> {
        let Some(last) = layers.last() else {
            return Err(RouterError::InvalidShape("at least one layer required".into()));
        };
        if last.outputs != 1 {
            return Err(RouterError::InvalidShape(format!("final layer must have 1 output, has {}", last.outputs)));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(RouterError::InvalidShape(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(RouterError::InvalidShape(format!("layer {i} parameter sizes disagree with its shape")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(RouterError::InvalidShape(format!("layer {i} input {} != previous output", l.inputs)));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(RouterError::NonFinite);
            }
        }
        Ok(Self { layers })
    }

    /// All-zero parameters for the given layer widths, e.g. `[d, h, 1]`.
    pub fn zeros(dims: &[usize]) -> Result<Self, RouterError> {
        if dims.len() < 2 {
            return Err(RouterError::InvalidShape("need at least input and output widths".into()));
        }
        Self::new(dims.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect())
    }

    /// Xavier-uniform weights, zero biases, deterministic in `seed`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self, RouterError> {
        let mut model = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut model.layers {
            let bound = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            l.weights.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        }
        Ok(model)
    }

    /// The default `[d, d/2, 1]` shape.
    pub fn default_dims(input_dim: usize) -> Vec<usize> {
        vec![input_dim, (input_dim / 2).max(1), 1]
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.outputs)).collect()
    }

    /// Pre-sigmoid output.
    pub fn logit(&self, x: &[f64]) -> Result<f64, RouterError> {
        if x.len() != self.input_dim() {
            return Err(RouterError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            a = l.forward(&a);
            if i < last {
                a.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(a[0])
    }

    pub fn score_slice(&self, x: &[f64]) -> Result<f64, RouterError> {
        Ok(sigmoid(self.logit(x)?).clamp(SCORE_EPS, 1.0 - SCORE_EPS))
    }

    /// Confidence in (0, 1) that the small model's token suffices.
    pub fn score(&self, hidden: &HiddenState) -> Result<f64, RouterError> {
        self.score_slice(hidden.as_slice())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), RouterError> {
        if params.len() != self.num_params() {
            return Err(RouterError::DimensionMismatch { expected: self.num_params(), got: params.len() });
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = it.next().unwrap());
        }
        Ok(())
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let meta = serde_json::json!({ "input_dim": self.input_dim(), "layer_dims": self.layer_dims() });
        let mut f = TensorFile::new(ROUTER_KIND, meta);
        for (i, l) in self.layers.iter().enumerate() {
            f.push(format!("layers.{i}.weight"), vec![l.outputs, l.inputs], l.weights.clone()).expect("consistent");
            f.push(format!("layers.{i}.bias"), vec![l.outputs], l.bias.clone()).expect("consistent");
        }
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self, RouterError> {
        f.expect_kind(ROUTER_KIND)?;
        let dims: Vec<usize> = serde_json::from_value(f.meta["layer_dims"].clone())
            .map_err(|e| RouterError::InvalidShape(format!("layer_dims: {e}")))?;
        let input_dim = f.meta["input_dim"].as_u64().map(|v| v as usize);
        if dims.len() < 2 || input_dim != Some(dims[0]) {
            return Err(RouterError::InvalidShape("header input_dim disagrees with layer_dims".into()));
        }
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            layers.push(DenseLayer {
                inputs: w[0],
                outputs: w[1],
                weights: f.expect(&format!("layers.{i}.weight"), &[w[1], w[0]])?.to_vec(),
                bias: f.expect(&format!("layers.{i}.bias"), &[w[1]])?.to_vec(),
            });
        }
        Self::new(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RouterError> {
        Ok(self.to_tensor_file().write(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RouterError> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }

    /// Loads and checks the input width against the engine's hidden size.
    pub fn load_for_engine(path: impl AsRef<Path>, hidden_dim: usize) -> Result<Self, RouterError> {
        let model = Self::load(path)?;
        if model.input_dim() != hidden_dim {
            return Err(RouterError::DimensionMismatch { expected: hidden_dim, got: model.input_dim() });
        }
        Ok(model)
    }
}

/// Routing rule reduced to a scalar cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "cutoff")]
pub enum DeferralPolicy {
    /// LLM iff confidence < tau.
    CiterThreshold(f64),
    /// LLM iff deferral score (1 - confidence) > eta.
    CollmDeferral(f64),
}

impl DeferralPolicy {
    /// The equivalent threshold on confidence.
    pub fn threshold(&self) -> f64 {
        match *self {
            DeferralPolicy::CiterThreshold(tau) => tau,
            DeferralPolicy::CollmDeferral(eta) => 1.0 - eta,
        }
    }
}

pub fn decide(confidence: f64, policy: DeferralPolicy) -> Route {
    let to_llm = match policy {
        DeferralPolicy::CiterThreshold(tau) => confidence < tau,
        DeferralPolicy::CollmDeferral(eta) => (1.0 - confidence) > eta,
    };
    if to_llm {
        Route::Llm
    } else {
        Route::Slm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub token_index: usize,
    pub confidence: f64,
    pub threshold: f64,
    pub route: Route,
}

pub fn route_token(
    router: &RouterModel,
    hidden: &HiddenState,
    policy: DeferralPolicy,
    token_index: usize,
) -> Result<RoutingDecision, RouterError> {
    let confidence = router.score(hidden)?;
    Ok(RoutingDecision { token_index, confidence, threshold: policy.threshold(), route: decide(confidence, policy) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hidden(v: &[f64]) -> HiddenState {
        HiddenState::new(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_router_scores_one_half() {
        let r = RouterModel::zeros(&[5, 3, 1]).unwrap();
        assert_eq!(r.score(&hidden(&[1.0, -2.0, 3.0, 0.5, 9.0])).unwrap(), 0.5);
    }

    #[test]
    fn symmetric_linear_router_cancels() {
        let r = RouterModel::new(vec![DenseLayer { inputs: 2, outputs: 1, weights: vec![1.0, -1.0], bias: vec![0.0] }]).unwrap();
        assert_eq!(r.score(&hidden(&[2.0, 2.0])).unwrap(), 0.5);
    }

    /// Hand-computed forward pass:
    /// layer 1: W = [[1, 2], [-1, 0.5], [0.5, -3]], b = [0.1, 0.2, -0.5]
    ///   on x = [1, 0]: pre = [1.1, -0.8, 0.0] -> relu = [1.1, 0, 0]
    /// layer 2: w = [2, 1, -1], b = -1: z = 2.2 - 1 = 1.2
    /// sigmoid(1.2) = 1 / (1 + e^-1.2) = 0.7685247834990175
    #[test]
    fn two_layer_forward_matches_hand_arithmetic() {
        let r = RouterModel::new(vec![
            DenseLayer { inputs: 2, outputs: 3, weights: vec![1.0, 2.0, -1.0, 0.5, 0.5, -3.0], bias: vec![0.1, 0.2, -0.5] },
            DenseLayer { inputs: 3, outputs: 1, weights: vec![2.0, 1.0, -1.0], bias: vec![-1.0] },
        ])
        .unwrap();
        let s = r.score(&hidden(&[1.0, 0.0])).unwrap();
        assert!((s - 0.768_524_783_499_017_5).abs() < 1e-12, "{s}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let r = RouterModel::zeros(&[4, 2, 1]).unwrap();
        assert!(matches!(r.score(&hidden(&[1.0])), Err(RouterError::DimensionMismatch { expected: 4, got: 1 })));
    }

    #[test]
    fn decide_examples() {
        assert_eq!(decide(0.65, DeferralPolicy::CiterThreshold(0.7)), Route::Llm);
        assert_eq!(decide(0.90, DeferralPolicy::CiterThreshold(0.7)), Route::Slm);
        assert_eq!(decide(0.70, DeferralPolicy::CiterThreshold(0.7)), Route::Slm);
    }

    #[test]
    fn degenerate_thresholds() {
        let r = RouterModel::init(&[4, 2, 1], 3).unwrap();
        for i in 0..50 {
            let h = hidden(&[i as f64 * 0.3 - 7.0, 1.0, -(i as f64), 2.5]);
            assert_eq!(route_token(&r, &h, DeferralPolicy::CiterThreshold(0.0), i).unwrap().route, Route::Slm);
            assert_eq!(route_token(&r, &h, DeferralPolicy::CiterThreshold(1.0), i).unwrap().route, Route::Llm);
        }
    }

    #[test]
    fn score_stays_strictly_inside_unit_interval_when_saturated() {
        let r = RouterModel::new(vec![DenseLayer { inputs: 1, outputs: 1, weights: vec![1.0], bias: vec![0.0] }]).unwrap();
        let hi = r.score(&hidden(&[1e6])).unwrap();
        let lo = r.score(&hidden(&[-1e6])).unwrap();
        assert!(hi < 1.0 && lo > 0.0);
    }

    #[test]
    fn file_round_trip_and_engine_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.trt");
        let r = RouterModel::init(&[8, 4, 1], 1).unwrap();
        r.save(&path).unwrap();
        assert_eq!(RouterModel::load(&path).unwrap(), r);
        assert!(RouterModel::load_for_engine(&path, 8).is_ok());
        assert!(matches!(
            RouterModel::load_for_engine(&path, 64),
            Err(RouterError::DimensionMismatch { expected: 64, got: 8 })
        ));
    }

    proptest::proptest! {
        #[test]
        fn threshold_monotonicity(confs in proptest::collection::vec(0.0f64..=1.0, 1..100), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for c in confs {
                if decide(c, DeferralPolicy::CiterThreshold(lo)) == Route::Llm {
                    proptest::prop_assert_eq!(decide(c, DeferralPolicy::CiterThreshold(hi)), Route::Llm);
                }
            }
        }

        #[test]
        fn policies_agree_away_from_ties(c in 0.0f64..=1.0, tau in 0.0f64..=1.0) {
            proptest::prop_assume!((c - tau).abs() > 1e-9);
            proptest::prop_assert_eq!(
                decide(c, DeferralPolicy::CiterThreshold(tau)),
                decide(c, DeferralPolicy::CollmDeferral(1.0 - tau))
            );
        }

        #[test]
        fn scores_bounded_and_pure(seed in 0u64..1000, x in proptest::collection::vec(-50.0f64..50.0, 6)) {
            let r = RouterModel::init(&[6, 3, 1], seed).unwrap();
            let h = hidden(&x);
            let a = route_token(&r, &h, DeferralPolicy::CiterThreshold(0.5), 3).unwrap();
            let b = route_token(&r, &h, DeferralPolicy::CiterThreshold(0.5), 3).unwrap();
            proptest::prop_assert!(a.confidence > 0.0 && a.confidence < 1.0);
            proptest::prop_assert_eq!(a, b);
        }
    }
}
