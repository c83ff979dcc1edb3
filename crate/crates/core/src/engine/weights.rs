use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tokenizer::{BOS, VOCAB_SIZE};
use super::EngineError;
use crate::tensorfile::TensorFile;

pub const MODEL_KIND: &str = "tokenroute.model";

/// Logit bias given to bytes an untrained model should never emit
/// (control characters, non-ASCII, BOS). Large but finite.
pub const SUPPRESSED_BIAS: f64 = -1.0e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mlp_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The reference small model: d = 64, 4 layers, 4 heads, byte vocabulary.
    pub fn reference(seed: u64) -> Self {
        Self { d_model: 64, n_layers: 4, n_heads: 4, vocab_size: VOCAB_SIZE, max_seq_len: 1024, mlp_dim: 256, seed }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |msg: String| Err(EngineError::InvalidWeights(msg));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.mlp_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size < VOCAB_SIZE {
            return bad(format!("vocab_size {} smaller than the byte vocabulary", self.vocab_size));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Weights of one pre-norm transformer block. Matrices are row-major
/// `[in, out]` so that `y = x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1: LayerNormWeights,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2: LayerNormWeights,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub ln_f: LayerNormWeights,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("valid std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    fn layer_norm(&mut self, d: usize) -> LayerNormWeights {
        LayerNormWeights {
            gain: self.normal(d, 0.1).into_iter().map(|g| 1.0 + g).collect(),
            bias: self.normal(d, 0.1),
        }
    }
}

fn printable(byte: usize) -> bool {
    byte == b'\n' as usize || (0x20..0x7f).contains(&byte)
}

impl ModelWeights {
    /// Deterministic random initialization from `config.seed`.
    ///
    /// The output bias suppresses non-printable bytes and BOS so that an
    /// untrained model still emits ASCII text.
    pub fn random(config: ModelConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let d = config.d_model;
        let m = config.mlp_dim;
        let v = config.vocab_size;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(config.seed) };
        let proj = 1.0 / (d as f64).sqrt();
        let tok_emb = init.normal(v * d, 1.0);
        let pos_emb = init.normal(config.max_seq_len * d, 0.5);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1: init.layer_norm(d),
                wq: init.normal(d * d, proj),
                bq: init.normal(d, 0.02),
                wk: init.normal(d * d, proj),
                bk: init.normal(d, 0.02),
                wv: init.normal(d * d, proj),
                bv: init.normal(d, 0.02),
                wo: init.normal(d * d, proj),
                bo: init.normal(d, 0.02),
                ln2: init.layer_norm(d),
                w1: init.normal(d * m, proj),
                b1: init.normal(m, 0.02),
                w2: init.normal(m * d, 1.0 / (m as f64).sqrt()),
                b2: init.normal(d, 0.02),
            })
            .collect();
        let ln_f = init.layer_norm(d);
        let head_w = init.normal(d * v, proj);
        let mut head_b = init.normal(v, 0.1);
        for (i, b) in head_b.iter_mut().enumerate() {
            if (i < 256 && !printable(i)) || i == BOS.index() {
                *b = SUPPRESSED_BIAS;
            }
        }
        Ok(Self { config, tok_emb, pos_emb, layers, ln_f, head_w, head_b })
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let c = &self.config;
        let (d, m, v) = (c.d_model, c.mlp_dim, c.vocab_size);
        let mut f = TensorFile::new(MODEL_KIND, serde_json::to_value(c).expect("config serializes"));
        let mut put = |name: String, shape: Vec<usize>, data: &[f64]| {
            f.push(name, shape, data.to_vec()).expect("shapes are consistent by construction");
        };
        put("tok_emb".into(), vec![v, d], &self.tok_emb);
        put("pos_emb".into(), vec![c.max_seq_len, d], &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            put(format!("{p}.ln1.gain"), vec![d], &l.ln1.gain);
            put(format!("{p}.ln1.bias"), vec![d], &l.ln1.bias);
            put(format!("{p}.attn.wq"), vec![d, d], &l.wq);
            put(format!("{p}.attn.bq"), vec![d], &l.bq);
            put(format!("{p}.attn.wk"), vec![d, d], &l.wk);
            put(format!("{p}.attn.bk"), vec![d], &l.bk);
            put(format!("{p}.attn.wv"), vec![d, d], &l.wv);
            put(format!("{p}.attn.bv"), vec![d], &l.bv);
            put(format!("{p}.attn.wo"), vec![d, d], &l.wo);
            put(format!("{p}.attn.bo"), vec![d], &l.bo);
            put(format!("{p}.ln2.gain"), vec![d], &l.ln2.gain);
            put(format!("{p}.ln2.bias"), vec![d], &l.ln2.bias);
            put(format!("{p}.mlp.w1"), vec![d, m], &l.w1);
            put(format!("{p}.mlp.b1"), vec![m], &l.b1);
            put(format!("{p}.mlp.w2"), vec![m, d], &l.w2);
            put(format!("{p}.mlp.b2"), vec![d], &l.b2);
        }
        put("ln_f.gain".into(), vec![d], &self.ln_f.gain);
        put("ln_f.bias".into(), vec![d], &self.ln_f.bias);
        put("head.w".into(), vec![d, v], &self.head_w);
        put("head.b".into(), vec![v], &self.head_b);
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self, EngineError> {
        f.expect_kind(MODEL_KIND)?;
        let config: ModelConfig =
            serde_json::from_value(f.meta.clone()).map_err(|e| EngineError::InvalidWeights(e.to_string()))?;
        config.validate()?;
        let (d, m, v) = (config.d_model, config.mlp_dim, config.vocab_size);
        let get = |name: &str, shape: &[usize]| -> Result<Vec<f64>, EngineError> {
            let data = f.expect(name, shape)?;
            if data.iter().any(|x| !x.is_finite()) {
                return Err(EngineError::InvalidWeights(format!("tensor {name} has non-finite entries")));
            }
            Ok(data.to_vec())
        };
        let ln = |p: &str| -> Result<LayerNormWeights, EngineError> {
            Ok(LayerNormWeights { gain: get(&format!("{p}.gain"), &[d])?, bias: get(&format!("{p}.bias"), &[d])? })
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("layers.{i}");
            layers.push(LayerWeights {
                ln1: ln(&format!("{p}.ln1"))?,
                wq: get(&format!("{p}.attn.wq"), &[d, d])?,
                bq: get(&format!("{p}.attn.bq"), &[d])?,
                wk: get(&format!("{p}.attn.wk"), &[d, d])?,
                bk: get(&format!("{p}.attn.bk"), &[d])?,
                wv: get(&format!("{p}.attn.wv"), &[d, d])?,
                bv: get(&format!("{p}.attn.bv"), &[d])?,
                wo: get(&format!("{p}.attn.wo"), &[d, d])?,
                bo: get(&format!("{p}.attn.bo"), &[d])?,
                ln2: ln(&format!("{p}.ln2"))?,
                w1: get(&format!("{p}.mlp.w1"), &[d, m])?,
                b1: get(&format!("{p}.mlp.b1"), &[m])?,
                w2: get(&format!("{p}.mlp.w2"), &[m, d])?,
                b2: get(&format!("{p}.mlp.b2"), &[d])?,
            });
        }
        Ok(Self {
            config,
            tok_emb: get("tok_emb", &[v, d])?,
            pos_emb: get("pos_emb", &[config.max_seq_len, d])?,
            layers,
            ln_f: ln("ln_f")?,
            head_w: get("head.w", &[d, v])?,
            head_b: get("head.b", &[v])?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EngineError> {
        Ok(self.to_tensor_file().write(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_init_is_seed_deterministic() {
        let a = ModelWeights::random(ModelConfig::reference(7)).unwrap();
        let b = ModelWeights::random(ModelConfig::reference(7)).unwrap();
        let c = ModelWeights::random(ModelConfig::reference(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tok_emb, c.tok_emb);
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.trt");
        let w = ModelWeights::random(ModelConfig { max_seq_len: 32, ..ModelConfig::reference(3) }).unwrap();
        w.save(&path).unwrap();
        assert_eq!(ModelWeights::load(&path).unwrap(), w);
    }

    #[test]
    fn rejects_bad_head_split() {
        let cfg = ModelConfig { n_heads: 5, ..ModelConfig::reference(0) };
        assert!(matches!(ModelWeights::random(cfg), Err(EngineError::InvalidWeights(_))));
    }

    #[test]
    fn rejects_wrong_kind() {
        let f = TensorFile::new("something.else", serde_json::Value::Null);
        assert!(ModelWeights::from_tensor_file(&f).is_err());
    }
}
