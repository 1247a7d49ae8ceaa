//! Real backends: an OpenAI-compatible chat LLM over HTTP and an image
//! "encoder" that serves precomputed features from an embedding cache.
//!
//! The core pipeline never requires these; they exist so a real encoder and
//! a real LLM can be swapped in for end-to-end runs. Image features are
//! expected to be computed once by an external encoder and imported into
//! the cache format in [`crate::backends::cache`].

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array1;

use crate::backends::cache::EmbeddingCache;
use crate::backends::{Embedding, ImageEncoder, ImageSource, LlmApi};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Environment variable holding the API key.
pub const API_KEY_ENV: &str = "COCOBM_API_KEY";
/// Fallback key variable shared with other OpenAI-compatible tooling.
pub const API_KEY_ENV_FALLBACK: &str = "OPENAI_API_KEY";
/// Environment variable overriding the API base URL.
pub const API_BASE_ENV: &str = "COCOBM_API_BASE";

const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";

/// Chat-completions client for any OpenAI-compatible endpoint.
pub struct HttpLlm {
    base_url: String,
    api_key: String,
    model: String,
    client: reqwest::blocking::Client,
    calls: AtomicUsize,
}

impl HttpLlm {
    pub fn new(base_url: &str, api_key: &str, model: &str) -> Self {
        HttpLlm {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: api_key.to_string(),
            model: model.to_string(),
            client: reqwest::blocking::Client::new(),
            calls: AtomicUsize::new(0),
        }
    }

    /// Read credentials from the environment.
    pub fn from_env(model: &str) -> Result<Self> {
        let key = std::env::var(API_KEY_ENV)
            .or_else(|_| std::env::var(API_KEY_ENV_FALLBACK))
            .map_err(|_| {
                Error::InvalidConfig(format!(
                    "real LLM backend needs {API_KEY_ENV} (or {API_KEY_ENV_FALLBACK}) set"
                ))
            })?;
        let base = std::env::var(API_BASE_ENV).unwrap_or_else(|_| DEFAULT_API_BASE.to_string());
        Ok(HttpLlm::new(&base, &key, model))
    }
}

impl LlmApi for HttpLlm {
    fn complete(&self, prompt: &str, temperature: f64, _sample_index: usize) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        });
        let resp = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| Error::LlmTransport(e.to_string()))?;
        let status = resp.status();
        let value: serde_json::Value = resp
            .json()
            .map_err(|e| Error::LlmTransport(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::LlmTransport(format!(
                "HTTP {status}: {}",
                value.to_string().chars().take(400).collect::<String>()
            )));
        }
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| Error::LlmTransport("response missing choices[0].message.content".into()))
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Image encoder backed by precomputed features. Looks features up by the
/// image's file name; a missing or unknown file is an error carrying the
/// path.
pub struct FeatureFileEncoder {
    cache: EmbeddingCache,
}

impl FeatureFileEncoder {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(FeatureFileEncoder {
            cache: EmbeddingCache::load(path)?,
        })
    }
}

impl<T: Scalar> ImageEncoder<T> for FeatureFileEncoder {
    fn dim(&self) -> usize {
        self.cache.dim()
    }

    fn encode(&self, source: &ImageSource) -> Result<Embedding<T>> {
        match source {
            ImageSource::Feature(values) => {
                Embedding::unit(Array1::from_iter(values.iter().map(|&v| T::from_f64(v))))
            }
            ImageSource::File(path) => {
                let key = path
                    .file_name()
                    .map(|n| n.to_string_lossy().to_string())
                    .unwrap_or_default();
                let values: Vec<T> = self.cache.get(&key).ok_or_else(|| Error::UnreadableImage {
                    path: path.display().to_string(),
                    reason: "no precomputed feature for this image in the cache".to_string(),
                })?;
                Embedding::unit(Array1::from(values))
            }
        }
    }
}
