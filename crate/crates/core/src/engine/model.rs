use std::sync::Arc;

use super::{check_tokens, Backend, EngineError, LayerNormWeights, ModelWeights, StepOutput};
use crate::types::{HiddenState, TokenId};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Default, PartialEq)]
struct LayerKv {
    /// `[len, d]` row-major keys.
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Per-layer keys and values of every processed position.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerKv>,
    len: usize,
}

impl KvCache {
    fn empty(n_layers: usize) -> Self {
        Self { layers: vec![LayerKv::default(); n_layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Reference decoder-only transformer (pre-norm, learned positions, GELU MLP),
/// double precision throughout.
#[derive(Debug, Clone)]
pub struct TinyTransformer {
    weights: Arc<ModelWeights>,
}

impl TinyTransformer {
    pub fn new(weights: ModelWeights) -> Self {
        Self { weights: Arc::new(weights) }
    }

    pub fn from_shared(weights: Arc<ModelWeights>) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    fn embed(&self, token: TokenId, pos: usize) -> Vec<f64> {
        let d = self.weights.config.d_model;
        let t = &self.weights.tok_emb[token.index() * d..(token.index() + 1) * d];
        let p = &self.weights.pos_emb[pos * d..(pos + 1) * d];
        t.iter().zip(p).map(|(a, b)| a + b).collect()
    }

    fn finish(&self, x: &[f64]) -> StepOutput {
        let w = &*self.weights;
        let hidden = layer_norm(x, &w.ln_f);
        let logits = affine(&hidden, &w.head_w, &w.head_b);
        StepOutput { logits, hidden: HiddenState::new(hidden).expect("finite weights give finite activations") }
    }
}

fn layer_norm(x: &[f64], ln: &LayerNormWeights) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(&ln.gain).zip(&ln.bias).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

/// `x · W + b` with `W` row-major `[x.len(), b.len()]`.
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out_dim = b.len();
    let mut out = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        let row = &w[i * out_dim..(i + 1) * out_dim];
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

/// Row-wise `X · W + b` for an `[n, in]` matrix.
fn affine_rows(x: &[f64], n: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let in_dim = x.len() / n;
    let out_dim = b.len();
    let mut out = Vec::with_capacity(n * out_dim);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    for r in 0..n {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let or = &mut out[r * out_dim..(r + 1) * out_dim];
        for (i, xi) in xr.iter().enumerate() {
            let row = &w[i * out_dim..(i + 1) * out_dim];
            for (o, wij) in or.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
}

impl Backend for TinyTransformer {
    type Cache = KvCache;

    fn hidden_dim(&self) -> usize {
        self.weights.config.d_model
    }

    fn vocab_size(&self) -> usize {
        self.weights.config.vocab_size
    }

    /// Batched causal forward over the whole sequence.
    fn prefill(&self, tokens: &[TokenId]) -> Result<(KvCache, StepOutput), EngineError> {
        let cfg = self.weights.config;
        if tokens.is_empty() {
            return Err(EngineError::EmptyInput);
        }
        check_tokens(tokens, cfg.vocab_size, 0)?;
        if tokens.len() > cfg.max_seq_len {
            return Err(EngineError::ContextOverflow { max_seq_len: cfg.max_seq_len });
        }
        let (n, d, hd) = (tokens.len(), cfg.d_model, cfg.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x: Vec<f64> = tokens.iter().enumerate().flat_map(|(p, &t)| self.embed(t, p)).collect();
        let mut cache = KvCache::empty(cfg.n_layers);

        for (layer, kv) in self.weights.layers.iter().zip(cache.layers.iter_mut()) {
            let h: Vec<f64> = x.chunks_exact(d).flat_map(|row| layer_norm(row, &layer.ln1)).collect();
            let q = affine_rows(&h, n, &layer.wq, &layer.bq);
            let k = affine_rows(&h, n, &layer.wk, &layer.bk);
            let v = affine_rows(&h, n, &layer.wv, &layer.bv);

            let mut attn = vec![0.0; n * d];
            for head in 0..cfg.n_heads {
                let off = head * hd;
                for i in 0..n {
                    let qi = &q[i * d + off..i * d + off + hd];
                    let mut scores: Vec<f64> = (0..=i)
                        .map(|j| qi.iter().zip(&k[j * d + off..j * d + off + hd]).map(|(a, b)| a * b).sum::<f64>() * scale)
                        .collect();
                    softmax_in_place(&mut scores);
                    let out = &mut attn[i * d + off..i * d + off + hd];
                    for (j, p) in scores.iter().enumerate() {
                        for (o, vj) in out.iter_mut().zip(&v[j * d + off..j * d + off + hd]) {
                            *o += p * vj;
                        }
                    }
                }
            }
            let o = affine_rows(&attn, n, &layer.wo, &layer.bo);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }

            let h2: Vec<f64> = x.chunks_exact(d).flat_map(|row| layer_norm(row, &layer.ln2)).collect();
            let mut up = affine_rows(&h2, n, &layer.w1, &layer.b1);
            up.iter_mut().for_each(|u| *u = gelu(*u));
            let down = affine_rows(&up, n, &layer.w2, &layer.b2);
            for (xi, di) in x.iter_mut().zip(&down) {
                *xi += di;
            }

            kv.k = k;
            kv.v = v;
        }
        cache.len = n;
        let out = self.finish(&x[(n - 1) * d..]);
        Ok((cache, out))
    }

    /// Single-position forward attending over the cached keys and values.
    fn decode_step(&self, cache: &mut KvCache, token: TokenId) -> Result<StepOutput, EngineError> {
        let cfg = self.weights.config;
        check_tokens(&[token], cfg.vocab_size, cache.len)?;
        if cache.len >= cfg.max_seq_len {
            return Err(EngineError::ContextOverflow { max_seq_len: cfg.max_seq_len });
        }
        let (d, hd) = (cfg.d_model, cfg.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let pos = cache.len;
        let mut x = self.embed(token, pos);

        for (layer, kv) in self.weights.layers.iter().zip(cache.layers.iter_mut()) {
            let h = layer_norm(&x, &layer.ln1);
            let q = affine(&h, &layer.wq, &layer.bq);
            kv.k.extend(affine(&h, &layer.wk, &layer.bk));
            kv.v.extend(affine(&h, &layer.wv, &layer.bv));

            let mut attn = vec![0.0; d];
            for head in 0..cfg.n_heads {
                let off = head * hd;
                let qh = &q[off..off + hd];
                let mut scores: Vec<f64> = kv
                    .k
                    .chunks_exact(d)
                    .map(|kj| qh.iter().zip(&kj[off..off + hd]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                softmax_in_place(&mut scores);
                for (p, vj) in scores.iter().zip(kv.v.chunks_exact(d)) {
                    for (o, v) in attn[off..off + hd].iter_mut().zip(&vj[off..off + hd]) {
                        *o += p * v;
                    }
                }
            }
            let o = affine(&attn, &layer.wo, &layer.bo);
            x.iter_mut().zip(&o).for_each(|(xi, oi)| *xi += oi);

            let h2 = layer_norm(&x, &layer.ln2);
            let mut up = affine(&h2, &layer.w1, &layer.b1);
            up.iter_mut().for_each(|u| *u = gelu(*u));
            let down = affine(&up, &layer.w2, &layer.b2);
            x.iter_mut().zip(&down).for_each(|(xi, di)| *xi += di);
        }
        cache.len += 1;
        Ok(self.finish(&x))
    }

    fn cache_len(&self, cache: &KvCache) -> usize {
        cache.len
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{greedy_next, ByteTokenizer, ModelConfig, BOS, EOS};

    fn small_model(seed: u64) -> TinyTransformer {
        TinyTransformer::new(ModelWeights::random(ModelConfig { max_seq_len: 128, ..ModelConfig::reference(seed) }).unwrap())
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn prefill_single_bos() {
        let m = small_model(1);
        let (cache, out) = m.prefill(&[BOS]).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(out.hidden.dim(), 64);
        assert_eq!(out.logits.len(), 258);
    }

    #[test]
    fn prefill_length_matches_token_count() {
        let m = small_model(1);
        let ids = ByteTokenizer.encode("The mitochondria is the powerhouse of the");
        let (cache, _) = m.prefill(&ids).unwrap();
        assert_eq!(cache.len(), ids.len());
        assert_eq!(ids.len(), 41);
    }

    #[test]
    fn decode_step_increments_length() {
        let m = small_model(2);
        let (mut cache, _) = m.prefill(&[BOS]).unwrap();
        m.decode_step(&mut cache, TokenId(b'a' as u32)).unwrap();
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn errors_leave_cache_untouched() {
        let m = small_model(2);
        assert!(matches!(m.prefill(&[]), Err(EngineError::EmptyInput)));
        assert!(matches!(
            m.prefill(&[BOS, TokenId(999)]),
            Err(EngineError::TokenOutOfVocab { position: 1, id: TokenId(999) })
        ));
        let (mut cache, _) = m.prefill(&[BOS]).unwrap();
        let before = cache.clone();
        assert!(m.decode_step(&mut cache, TokenId(400)).is_err());
        assert_eq!(cache, before);
    }

    #[test]
    fn context_overflow_is_reported() {
        let m = TinyTransformer::new(ModelWeights::random(ModelConfig { max_seq_len: 4, ..ModelConfig::reference(0) }).unwrap());
        let (mut cache, _) = m.prefill(&[BOS, TokenId(65), TokenId(66), TokenId(67)]).unwrap();
        assert!(matches!(m.decode_step(&mut cache, EOS), Err(EngineError::ContextOverflow { max_seq_len: 4 })));
    }

    /// Oracle: replay the sequence one decode step at a time.
    #[test]
    fn prefill_matches_sequential_replay() {
        let m = small_model(5);
        let ids = ByteTokenizer.encode_with_bos("kv caches are bookkeeping");
        let (_, batched) = m.prefill(&ids).unwrap();
        let (mut cache, mut step) = m.prefill(&ids[..1]).unwrap();
        for &t in &ids[1..] {
            step = m.decode_step(&mut cache, t).unwrap();
        }
        assert!(max_abs_diff(&batched.logits, &step.logits) < 1e-5);
        assert!(max_abs_diff(batched.hidden.as_slice(), step.hidden.as_slice()) < 1e-5);
    }

    #[test]
    fn greedy_chain_is_deterministic() {
        let m = small_model(9);
        let run = || {
            let (mut cache, mut out) = m.prefill(&ByteTokenizer.encode_with_bos("abc")).unwrap();
            let mut chain = Vec::new();
            for _ in 0..10 {
                let t = greedy_next(&out.logits);
                chain.push((t, out.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>()));
                out = m.decode_step(&mut cache, t).unwrap();
            }
            chain
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn untrained_model_emits_printable_text() {
        let m = small_model(11);
        let (_, out) = m.prefill(&ByteTokenizer.encode_with_bos("hello")).unwrap();
        let t = greedy_next(&out.logits);
        assert!(t == EOS || t.0 == b'\n' as u32 || (0x20..0x7f).contains(&t.0));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn incremental_matches_reprefill(bytes in proptest::collection::vec(0x20u8..0x7f, 1..24)) {
            let m = small_model(3);
            let mut ids = vec![BOS];
            ids.extend(ByteTokenizer.encode_bytes(&bytes));
            let n = ids.len();
            let (_, full) = m.prefill(&ids).unwrap();
            let (mut cache, _) = m.prefill(&ids[..n - 1]).unwrap();
            let step = m.decode_step(&mut cache, ids[n - 1]).unwrap();
            proptest::prop_assert!(max_abs_diff(&full.logits, &step.logits) < 1e-5);
            proptest::prop_assert_eq!(greedy_next(&full.logits), greedy_next(&step.logits));
        }
    }
}
