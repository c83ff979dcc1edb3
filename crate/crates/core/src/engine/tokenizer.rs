use crate::types::TokenId;

pub const BOS: TokenId = TokenId(256);
pub const EOS: TokenId = TokenId(257);
pub const VOCAB_SIZE: usize = 258;

/// Byte-level tokenizer: one token per byte plus BOS and EOS.
///
/// Shared by the small and the large model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        bytes.iter().map(|&b| TokenId(b as u32)).collect()
    }

    /// `[BOS] ++ encode(text)`, the form every prompt enters the models in.
    pub fn encode_with_bos(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(BOS);
        ids.extend(self.encode(text));
        ids
    }

    /// Raw bytes of the non-special tokens.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter().filter(|t| !self.is_special(**t)).map(|t| t.0 as u8).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id.index() >= 256
    }

    /// Display text of a single token (lossy for non-ASCII bytes).
    pub fn token_text(&self, id: TokenId) -> String {
        match id {
            BOS => "<bos>".to_string(),
            EOS => "<eos>".to_string(),
            t => String::from_utf8_lossy(&[t.0 as u8]).into_owned(),
        }
    }
}

/// Turns a stream of byte tokens into UTF-8 text deltas, holding back bytes
/// of an incomplete multi-byte character until it completes.
#[derive(Debug, Default, Clone)]
pub struct IncrementalDecoder {
    pending: Vec<u8>,
}

impl IncrementalDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: TokenId) -> String {
        if id.index() >= 256 {
            return String::new();
        }
        self.pending.push(id.0 as u8);
        match std::str::from_utf8(&self.pending) {
            Ok(s) => {
                let out = s.to_string();
                self.pending.clear();
                out
            }
            Err(e) if e.error_len().is_none() => {
                // incomplete trailing sequence: emit the valid prefix only
                let valid = e.valid_up_to();
                let out = String::from_utf8_lossy(&self.pending[..valid]).into_owned();
                self.pending.drain(..valid);
                out
            }
            Err(_) => {
                let out = String::from_utf8_lossy(&self.pending).into_owned();
                self.pending.clear();
                out
            }
        }
    }

    /// Flushes any dangling bytes as replacement characters.
    pub fn finish(&mut self) -> String {
        let out = String::from_utf8_lossy(&self.pending).into_owned();
        self.pending.clear();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_never_encoded() {
        let t = ByteTokenizer;
        let ids = t.encode_bytes(&(0u8..=255).collect::<Vec<_>>());
        assert!(ids.iter().all(|id| !t.is_special(*id)));
        assert_eq!(t.decode(&[BOS, TokenId(104), TokenId(105), EOS]), "hi");
    }

    #[test]
    fn incremental_decoder_holds_partial_utf8() {
        let t = ByteTokenizer;
        let mut dec = IncrementalDecoder::new();
        let out: Vec<String> = t.encode("aé").into_iter().map(|id| dec.push(id)).collect();
        assert_eq!(out, vec!["a".to_string(), String::new(), "é".to_string()]);
    }

    proptest::proptest! {
        #[test]
        fn decode_inverts_encode(bytes in proptest::collection::vec(proptest::num::u8::ANY, 0..128)) {
            let t = ByteTokenizer;
            proptest::prop_assert_eq!(t.decode_bytes(&t.encode_bytes(&bytes)), bytes);
        }

        #[test]
        fn deltas_concatenate_to_text(s in "\\PC{0,40}") {
            let t = ByteTokenizer;
            let mut dec = IncrementalDecoder::new();
            let mut joined: String = t.encode(&s).into_iter().map(|id| dec.push(id)).collect();
            joined.push_str(&dec.finish());
            proptest::prop_assert_eq!(joined, s);
        }
    }
}
