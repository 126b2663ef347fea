//! Text embedding contract with a deterministic hashing backend and a
//! remote embedding-service client.

mod hash;
#[cfg(feature = "remote")]
mod remote;

use std::path::PathBuf;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use hash::HashEmbedder;
#[cfg(feature = "remote")]
pub use remote::RemoteEmbedder;

/// Token budget for frame-level descriptions.
pub const DESCRIPTION_MAX_TOKENS: usize = 512;
/// Token budget for concatenated knowledge text.
pub const KNOWLEDGE_MAX_TOKENS: usize = 4096;

/// A T×d matrix of embeddings with a padding mask (`true` = real token).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSeq {
    vectors: Array2<f64>,
    mask: Vec<bool>,
}

impl TokenEmbeddingSeq {
    /// Validates shape, finiteness, and that masked rows are zero.
    pub fn new(vectors: Array2<f64>, mask: Vec<bool>) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::Empty("embedding sequence has no rows".into()));
        }
        if mask.len() != vectors.nrows() {
            return Err(Error::dims("sequence mask", vectors.nrows(), mask.len()));
        }
        if vectors.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding sequence".into()));
        }
        for (row, &keep) in vectors.rows().into_iter().zip(&mask) {
            if !keep && row.iter().any(|&x| x != 0.0) {
                return Err(Error::Invalid("masked rows must be all-zero".into()));
            }
        }
        Ok(TokenEmbeddingSeq { vectors, mask })
    }

    /// Sequence with every row marked real.
    pub fn unmasked(vectors: Array2<f64>) -> Result<Self> {
        let mask = vec![true; vectors.nrows()];
        Self::new(vectors, mask)
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn unmasked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<bool>) {
        (self.vectors, self.mask)
    }
}

/// Arithmetic mean of the unmasked rows.
pub fn mean_pool(seq: &TokenEmbeddingSeq) -> Result<Array1<f64>> {
    let count = seq.unmasked_count();
    if count == 0 {
        return Err(Error::Empty("cannot mean-pool a fully masked sequence".into()));
    }
    let mut acc = Array1::zeros(seq.dim());
    for (row, &keep) in seq.vectors.rows().into_iter().zip(&seq.mask) {
        if keep {
            acc += &row;
        }
    }
    Ok(acc / count as f64)
}

/// Cosine similarity; a zero-norm operand yields 0.0 with a warning.
pub fn cosine_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dims("cosine operands", u.len(), v.len()));
    }
    if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cosine operand".into()));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        log::warn!("cosine similarity with a zero-norm vector; returning 0.0");
        return Ok(0.0);
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Hash,
    Remote,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Hash => "hash",
            Backend::Remote => "remote",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub backend: Backend,
    pub d: usize,
    pub max_tokens: usize,
    pub endpoint: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub seed: u64,
    /// Bounded number of in-flight remote requests.
    pub concurrency: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            backend: Backend::Hash,
            d: 64,
            max_tokens: DESCRIPTION_MAX_TOKENS,
            endpoint: None,
            cache_dir: None,
            seed: 0,
            concurrency: 4,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Invalid("max_tokens must be positive".into()));
        }
        if self.backend == Backend::Remote && self.endpoint.is_none() {
            return Err(Error::Invalid("remote embedder requires an endpoint".into()));
        }
        Ok(())
    }

    pub fn meta(&self) -> EmbedderMeta {
        EmbedderMeta {
            backend: self.backend,
            dim: self.d,
            seed: self.seed,
        }
    }
}

/// The part of an embedder configuration persisted alongside artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderMeta {
    pub backend: Backend,
    pub dim: usize,
    pub seed: u64,
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn meta(&self) -> EmbedderMeta;

    /// Embeds `text`, keeping at most `max_tokens` rows.
    fn embed_tokens(&self, text: &str, max_tokens: usize) -> Result<TokenEmbeddingSeq>;

    /// Mean-pooled embedding of each text. Backends may batch.
    fn embed_pooled(&self, texts: &[&str], max_tokens: usize) -> Result<Vec<Array1<f64>>> {
        texts
            .iter()
            .map(|t| mean_pool(&self.embed_tokens(t, max_tokens)?))
            .collect()
    }
}

/// Constructs the backend named by `cfg`.
pub fn build_embedder(cfg: &EmbedderConfig) -> Result<Box<dyn Embedder>> {
    cfg.validate()?;
    match cfg.backend {
        Backend::Hash => Ok(Box::new(HashEmbedder::new(cfg.d, cfg.seed)?)),
        #[cfg(feature = "remote")]
        Backend::Remote => Ok(Box::new(RemoteEmbedder::from_config(cfg)?)),
        #[cfg(not(feature = "remote"))]
        Backend::Remote => Err(Error::Invalid(
            "remote embedder support was not compiled in".into(),
        )),
    }
}

/// One-shot convenience over [`build_embedder`] using `cfg.max_tokens`.
pub fn embed_tokens(text: &str, cfg: &EmbedderConfig) -> Result<TokenEmbeddingSeq> {
    build_embedder(cfg)?.embed_tokens(text, cfg.max_tokens)
}
