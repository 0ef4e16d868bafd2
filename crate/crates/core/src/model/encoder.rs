use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numeric::{uniform_fan_in, ParamStore, Tape, Var};

/// Anything that turns a token-id sequence into one hidden row per token.
pub trait Encoder: Send + Sync {
    fn hidden_dim(&self) -> usize;

    fn max_len(&self) -> usize;

    /// `[ids.len(), hidden_dim]` hidden states, recorded on `tape`.
    fn encode(&self, tape: &mut Tape, params: &ParamStore, ids: &[usize]) -> Result<Var, ModelError>;
}

/// Token + learned absolute position embeddings followed by one
/// single-head scaled dot-product self-attention layer with a residual
/// connection:
///
/// ```text
/// X = E[ids] + P[0..n]
/// H = X + softmax(X·Wq (X·Wk)^T / sqrt(d)) · X·Wv
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceEncoder {
    pub prefix: String,
    pub vocab_size: usize,
    pub d_model: usize,
    pub max_len: usize,
}

impl ReferenceEncoder {
    pub fn new(prefix: impl Into<String>, vocab_size: usize, d_model: usize, max_len: usize) -> Self {
        Self {
            prefix: prefix.into(),
            vocab_size,
            d_model,
            max_len,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.d_model;
        store.insert(self.name("tok_emb"), uniform_fan_in(rng, &[self.vocab_size, d], d));
        store.insert(self.name("pos_emb"), uniform_fan_in(rng, &[self.max_len, d], d));
        for w in ["wq", "wk", "wv"] {
            store.insert(self.name(w), uniform_fan_in(rng, &[d, d], d));
        }
    }

    /// Hidden states and the attention matrix.
    pub fn encode_with_attention(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        ids: &[usize],
    ) -> Result<(Var, Var), ModelError> {
        if ids.len() > self.max_len {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max_len: self.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(ModelError::TokenOutOfVocab {
                id: bad,
                vocab_size: self.vocab_size,
            });
        }
        let tok = tape.param(params, &self.name("tok_emb"))?;
        let pos = tape.param(params, &self.name("pos_emb"))?;
        let wq = tape.param(params, &self.name("wq"))?;
        let wk = tape.param(params, &self.name("wk"))?;
        let wv = tape.param(params, &self.name("wv"))?;

        let positions: Vec<usize> = (0..ids.len()).collect();
        let e = tape.gather_rows(tok, ids)?;
        let p = tape.gather_rows(pos, &positions)?;
        let x = tape.add(e, p)?;

        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.d_model as f64).sqrt());
        let attn = tape.softmax_rows(scores)?;
        let mixed = tape.matmul(attn, v)?;
        let h = tape.add(x, mixed)?;
        Ok((h, attn))
    }
}

impl Encoder for ReferenceEncoder {
    fn hidden_dim(&self) -> usize {
        self.d_model
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn encode(&self, tape: &mut Tape, params: &ParamStore, ids: &[usize]) -> Result<Var, ModelError> {
        self.encode_with_attention(tape, params, ids).map(|(h, _)| h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup() -> (ReferenceEncoder, ParamStore) {
        let enc = ReferenceEncoder::new("enc", 20, 6, 8);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        (enc, store)
    }

    #[test]
    fn one_row_per_token_and_attention_rows_sum_to_one() {
        let (enc, store) = setup();
        let mut tape = Tape::new();
        let (h, a) = enc
            .encode_with_attention(&mut tape, &store, &[3, 1, 4, 1, 5])
            .unwrap();
        assert_eq!(tape.value(h).shape(), &[5, 6]);
        let a = tape.value(a);
        for r in 0..5 {
            let s: f64 = a.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn length_limit_enforced() {
        let (enc, store) = setup();
        let mut tape = Tape::new();
        let err = enc.encode(&mut tape, &store, &[0; 9]).unwrap_err();
        assert!(matches!(err, ModelError::SequenceTooLong { len: 9, max_len: 8 }));
    }

    #[test]
    fn out_of_vocab_rejected() {
        let (enc, store) = setup();
        let mut tape = Tape::new();
        assert!(enc.encode(&mut tape, &store, &[20]).is_err());
    }

    #[test]
    fn deterministic() {
        let (enc, store) = setup();
        let run = || {
            let mut tape = Tape::new();
            let h = enc.encode(&mut tape, &store, &[1, 2, 3]).unwrap();
            tape.value(h).clone()
        };
        assert_eq!(run(), run());
    }
}
