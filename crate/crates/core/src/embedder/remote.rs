use std::collections::{HashMap, HashSet};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Backend, Embedder, EmbedderConfig, EmbedderMeta, TokenEmbeddingSeq};
use crate::error::{Error, Result};
use crate::remote::{DiskCache, HttpClient};

/// Texts per `/embed` request.
pub const MAX_BATCH: usize = 64;

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
    dim: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

/// Client for `POST {endpoint}/embed`. The service returns one pooled
/// vector per text, so every sequence produced here has a single row.
/// Values are stored at f32 precision so cached and fresh results agree bit for bit.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    endpoint: String,
    d: usize,
    seed: u64,
    concurrency: usize,
    client: HttpClient,
    cache: Option<DiskCache>,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        d: usize,
        client: HttpClient,
        cache: Option<DiskCache>,
    ) -> Self {
        RemoteEmbedder {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            d,
            seed: 0,
            concurrency: 4,
            client,
            cache,
        }
    }

    pub fn from_config(cfg: &EmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        let endpoint = cfg.endpoint.clone().expect("validated");
        let cache = match &cfg.cache_dir {
            Some(dir) => Some(DiskCache::new(dir)?),
            None => DiskCache::from_env()?,
        };
        let mut e = Self::new(endpoint, cfg.d, HttpClient::from_env(), cache);
        e.seed = cfg.seed;
        e.concurrency = cfg.concurrency.max(1);
        Ok(e)
    }

    fn cache_key(&self, text: &str) -> String {
        DiskCache::key(&[
            self.endpoint.as_bytes(),
            &(self.d as u64).to_le_bytes(),
            text.as_bytes(),
        ])
    }

    fn fetch_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let url = format!("{}/embed", self.endpoint);
        let value = self.client.post_json(&url, &EmbedRequest { texts, dim: self.d })?;
        let reply: EmbedResponse = serde_json::from_value(value)
            .map_err(|e| Error::Invalid(format!("{url}: malformed embed response: {e}")))?;
        if reply.dim != self.d {
            return Err(Error::dims("embedding service dim", self.d, reply.dim));
        }
        if reply.vectors.len() != texts.len() {
            return Err(Error::dims("embedding service vector count", texts.len(), reply.vectors.len()));
        }
        reply
            .vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.d {
                    return Err(Error::dims("embedding service vector", self.d, v.len()));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("embedding service vector".into()));
                }
                Ok(v.into_iter().map(|x| x as f32).collect())
            })
            .collect()
    }

    /// Resolves every text through the cache, fetching misses in batches of
    /// at most [`MAX_BATCH`] with up to `concurrency` requests in flight.
    fn resolve(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut found: HashMap<String, Vec<f32>> = HashMap::new();
        let mut missing: Vec<String> = Vec::new();
        let mut queued: HashSet<&str> = HashSet::new();
        for t in texts {
            if found.contains_key(t) || queued.contains(t.as_str()) {
                continue;
            }
            let cached = match &self.cache {
                Some(c) => c.get_vector(&self.cache_key(t))?,
                None => None,
            };
            match cached {
                Some(v) if v.len() == self.d => {
                    found.insert(t.clone(), v);
                }
                _ => {
                    queued.insert(t);
                    missing.push(t.clone());
                }
            }
        }

        let batches: Vec<&[String]> = missing.chunks(MAX_BATCH).collect();
        let mut fetched: Vec<Vec<f32>> = Vec::with_capacity(missing.len());
        for wave in batches.chunks(self.concurrency.max(1)) {
            let results: Vec<Result<Vec<Vec<f32>>>> = std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|batch| s.spawn(move || self.fetch_batch(batch)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("embedding worker panicked"))
                    .collect()
            });
            for r in results {
                fetched.extend(r?);
            }
        }
        for (text, vector) in missing.iter().zip(&fetched) {
            if let Some(c) = &self.cache {
                c.put_vector(&self.cache_key(text), vector)?;
            }
        }
        found.extend(missing.into_iter().zip(fetched));
        Ok(texts.iter().map(|t| found[t].clone()).collect())
    }

    fn truncate(text: &str, max_tokens: usize) -> String {
        text.split_whitespace()
            .take(max_tokens.max(1))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.d
    }

    fn meta(&self) -> EmbedderMeta {
        EmbedderMeta {
            backend: Backend::Remote,
            dim: self.d,
            seed: self.seed,
        }
    }

    fn embed_tokens(&self, text: &str, max_tokens: usize) -> Result<TokenEmbeddingSeq> {
        let text = Self::truncate(text, max_tokens);
        if text.is_empty() {
            return Err(Error::Empty("cannot embed empty text".into()));
        }
        let v = self.resolve(std::slice::from_ref(&text))?.remove(0);
        let row = Array2::from_shape_vec((1, self.d), v.into_iter().map(f64::from).collect())
            .expect("length checked against d");
        TokenEmbeddingSeq::unmasked(row)
    }

    fn embed_pooled(&self, texts: &[&str], max_tokens: usize) -> Result<Vec<Array1<f64>>> {
        let truncated: Vec<String> = texts.iter().map(|t| Self::truncate(t, max_tokens)).collect();
        if truncated.iter().any(String::is_empty) {
            return Err(Error::Empty("cannot embed empty text".into()));
        }
        Ok(self
            .resolve(&truncated)?
            .into_iter()
            .map(|v| v.into_iter().map(f64::from).collect())
            .collect())
    }
}
