use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::{tokenize, Backend, Embedder, EmbedderMeta, TokenEmbeddingSeq};
use crate::error::{Error, Result};

/// Signed buckets touched per token.
const BUCKETS_PER_TOKEN: usize = 8;

/// Feature-hashing embedder: every token maps to a fixed unit vector built
/// from `BUCKETS_PER_TOKEN` seeded, signed hash buckets. Equal tokens always
/// receive identical rows.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    d: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        Ok(HashEmbedder { d, seed })
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();

        let mut v = vec![0.0; self.d];
        for word in digest.chunks_exact(4).take(BUCKETS_PER_TOKEN) {
            let w = u32::from_le_bytes([word[0], word[1], word[2], word[3]]);
            let bucket = (w >> 1) as usize % self.d;
            let sign = if w & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // every bucket cancelled; fall back to a single deterministic axis
            v[(digest[0] as usize) % self.d] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.d
    }

    fn meta(&self) -> EmbedderMeta {
        EmbedderMeta {
            backend: Backend::Hash,
            dim: self.d,
            seed: self.seed,
        }
    }

    fn embed_tokens(&self, text: &str, max_tokens: usize) -> Result<TokenEmbeddingSeq> {
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Empty(format!("no tokens in text {text:?}")));
        }
        tokens.truncate(max_tokens.max(1));
        let mut m = Array2::zeros((tokens.len(), self.d));
        for (mut row, token) in m.rows_mut().into_iter().zip(&tokens) {
            for (dst, src) in row.iter_mut().zip(self.token_vector(token)) {
                *dst = src;
            }
        }
        TokenEmbeddingSeq::unmasked(m)
    }
}
