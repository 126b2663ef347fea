//! On-disk response cache and HTTP clients for the embedding and
//! generation services.

use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable holding the default cache directory.
pub const CACHE_DIR_ENV: &str = "TBVAD_CACHE_DIR";
/// Environment variable holding the per-request timeout in milliseconds.
pub const HTTP_TIMEOUT_ENV: &str = "TBVAD_HTTP_TIMEOUT_MS";

/// Anything that turns a prompt into text: a remote LLM, a recorded stub, a closure.
pub trait TextGenerator: Send + Sync {
    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String>;
}

impl<F> TextGenerator for F
where
    F: Fn(&str, usize) -> Result<String> + Send + Sync,
{
    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        self(prompt, max_new_tokens)
    }
}

/// Content-addressed cache: one file per SHA-256 key, written atomically.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(DiskCache { dir })
    }

    /// Cache rooted at `$TBVAD_CACHE_DIR`, if set.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Ok(Some(Self::new(PathBuf::from(dir))?)),
            _ => Ok(None),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Hex SHA-256 over the parts, each length-prefixed so concatenations cannot collide.
    pub fn key(parts: &[&[u8]]) -> String {
        let mut h = Sha256::new();
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(key)
    }

    pub fn get(&self, key: &str) -> Result<Option<Vec<u8>>> {
        let path = self.path(key);
        match std::fs::read(&path) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, key: &str, bytes: &[u8]) -> Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
        let path = self.path(key);
        tmp.persist(&path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    /// Reads a vector stored as an 8-byte little-endian count followed by f32 values.
    pub fn get_vector(&self, key: &str) -> Result<Option<Vec<f32>>> {
        let Some(bytes) = self.get(key)? else {
            return Ok(None);
        };
        decode_vector(&bytes).map(Some).ok_or_else(|| {
            Error::Invalid(format!("cache entry {key} is truncated or malformed"))
        })
    }

    pub fn put_vector(&self, key: &str, values: &[f32]) -> Result<()> {
        self.put(key, &encode_vector(values))
    }
}

pub fn encode_vector(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * values.len());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_vector(bytes: &[u8]) -> Option<Vec<f32>> {
    let count = u64::from_le_bytes(bytes.get(..8)?.try_into().ok()?) as usize;
    let body = bytes.get(8..)?;
    if body.len() != count.checked_mul(4)? {
        return None;
    }
    Some(
        body.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

#[cfg(feature = "remote")]
pub use http::{HttpClient, RemoteGenerator};

#[cfg(feature = "remote")]
mod http {
    use std::time::Duration;

    use serde::{Deserialize, Serialize};
    use serde_json::Value;

    use super::{DiskCache, TextGenerator, HTTP_TIMEOUT_ENV};
    use crate::error::{Error, Result};

    const DEFAULT_TIMEOUT_MS: u64 = 30_000;

    /// Blocking JSON-over-HTTP client with bounded retries.
    #[derive(Clone)]
    pub struct HttpClient {
        agent: ureq::Agent,
        pub max_attempts: u32,
        pub backoff: Duration,
    }

    impl std::fmt::Debug for HttpClient {
        fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            f.debug_struct("HttpClient")
                .field("max_attempts", &self.max_attempts)
                .field("backoff", &self.backoff)
                .finish()
        }
    }

    impl HttpClient {
        pub fn new(timeout: Duration) -> Self {
            let config = ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .http_status_as_error(false)
                .build();
            HttpClient {
                agent: ureq::Agent::new_with_config(config),
                max_attempts: 3,
                backoff: Duration::from_millis(100),
            }
        }

        /// Client whose timeout comes from `$TBVAD_HTTP_TIMEOUT_MS`.
        pub fn from_env() -> Self {
            let ms = std::env::var(HTTP_TIMEOUT_ENV)
                .ok()
                .and_then(|v| v.parse().ok())
                .unwrap_or(DEFAULT_TIMEOUT_MS);
            Self::new(Duration::from_millis(ms))
        }

        /// POSTs JSON and parses the JSON reply. Transport failures and
        /// non-200 statuses are retried; the final error carries the attempt count.
        pub fn post_json<B: Serialize>(&self, url: &str, body: &B) -> Result<Value> {
            let mut last = String::new();
            for attempt in 1..=self.max_attempts {
                match self.agent.post(url).send_json(body) {
                    Ok(mut resp) if resp.status().as_u16() == 200 => {
                        return resp.body_mut().read_json::<Value>().map_err(|e| Error::Remote {
                            attempts: attempt,
                            message: format!("{url}: unreadable response body: {e}"),
                        });
                    }
                    Ok(resp) => last = format!("{url}: HTTP {}", resp.status()),
                    Err(e) => last = format!("{url}: {e}"),
                }
                log::warn!("attempt {attempt}/{}: {last}", self.max_attempts);
                if attempt < self.max_attempts {
                    std::thread::sleep(self.backoff * attempt);
                }
            }
            Err(Error::Remote {
                attempts: self.max_attempts,
                message: last,
            })
        }
    }

    #[derive(Serialize)]
    struct GenerateRequest<'a> {
        prompt: &'a str,
        max_new_tokens: usize,
    }

    #[derive(Deserialize)]
    struct GenerateResponse {
        text: String,
    }

    /// Client for `POST {endpoint}/generate`, with optional disk cache.
    #[derive(Debug, Clone)]
    pub struct RemoteGenerator {
        endpoint: String,
        client: HttpClient,
        cache: Option<DiskCache>,
    }

    impl RemoteGenerator {
        pub fn new(endpoint: impl Into<String>, client: HttpClient, cache: Option<DiskCache>) -> Self {
            RemoteGenerator {
                endpoint: endpoint.into().trim_end_matches('/').to_string(),
                client,
                cache,
            }
        }

        fn cache_key(&self, prompt: &str, max_new_tokens: usize) -> String {
            DiskCache::key(&[
                b"generate",
                self.endpoint.as_bytes(),
                &(max_new_tokens as u64).to_le_bytes(),
                prompt.as_bytes(),
            ])
        }
    }

    impl TextGenerator for RemoteGenerator {
        fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
            let key = self.cache_key(prompt, max_new_tokens);
            if let Some(cache) = &self.cache {
                if let Some(bytes) = cache.get(&key)? {
                    if let Ok(text) = String::from_utf8(bytes) {
                        return Ok(text);
                    }
                }
            }
            let url = format!("{}/generate", self.endpoint);
            let value = self.client.post_json(&url, &GenerateRequest { prompt, max_new_tokens })?;
            let reply: GenerateResponse = serde_json::from_value(value)
                .map_err(|e| Error::Invalid(format!("{url}: malformed generate response: {e}")))?;
            if let Some(cache) = &self.cache {
                cache.put(&key, reply.text.as_bytes())?;
            }
            Ok(reply.text)
        }
    }
}
