//! The single boundary to model backends: chat completion, token-logprob
//! scoring and text embedding, with an optional on-disk response cache.

pub mod cache;
pub mod mock;
pub mod openai;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
pub use cache::{CacheKey, EndpointKind, ResponseCache};
pub use mock::{MockBackend, MockConfig};
pub use openai::{HttpProviderConfig, OpenAiBackend};

/// Outstanding requests allowed at once unless configured otherwise.
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub provider_id: String,
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    /// Distinguishes otherwise identical repeats in the cache.
    pub run_salt: u64,
}

impl ChatRequest {
    pub fn new(provider_id: impl Into<String>, model: impl Into<String>, prompt: impl Into<String>) -> Self {
        ChatRequest {
            provider_id: provider_id.into(),
            model: model.into(),
            prompt: prompt.into(),
            temperature: 0.0,
            run_salt: 0,
        }
    }

    pub fn salted(mut self, run_salt: u64) -> Self {
        self.run_salt = run_salt;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

/// Per-token log-probabilities of a scored text, in order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenLogprobTrace {
    pub tokens: Vec<TokenLogprob>,
    /// Tokens the backend reported without a conditional probability (e.g. the first).
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub model: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A model backend. Implementations do no caching of their own.
pub trait Backend: Send + Sync {
    fn chat(&self, model: &str, prompt: &str, temperature: f64) -> Result<String>;
    fn score_logprobs(&self, model: &str, text: &str) -> Result<TokenLogprobTrace>;
    fn embed(&self, model: &str, text: &str) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderConfig {
    Openai(HttpProviderConfig),
    Mock(MockConfig),
}

#[derive(Debug, Default)]
pub struct GatewayStats {
    backend_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl GatewayStats {
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::Relaxed)
    }
}

pub struct Gateway {
    backends: HashMap<String, Arc<dyn Backend>>,
    cache: Option<ResponseCache>,
    embedding_dims: Mutex<HashMap<(String, String), usize>>,
    stats: GatewayStats,
}

impl Gateway {
    pub fn new() -> Self {
        Gateway {
            backends: HashMap::new(),
            cache: None,
            embedding_dims: Mutex::new(HashMap::new()),
            stats: GatewayStats::default(),
        }
    }

    pub fn from_config(providers: &BTreeMap<String, ProviderConfig>, cache_dir: Option<PathBuf>) -> Result<Self> {
        let mut gw = Gateway::new();
        for (id, cfg) in providers {
            let backend: Arc<dyn Backend> = match cfg {
                ProviderConfig::Openai(http) => Arc::new(OpenAiBackend::new(id, http.clone())?),
                ProviderConfig::Mock(m) => Arc::new(MockBackend::new(m.clone())),
            };
            gw.backends.insert(id.clone(), backend);
        }
        if let Some(dir) = cache_dir {
            gw.cache = Some(ResponseCache::new(dir));
        }
        Ok(gw)
    }

    pub fn with_backend(mut self, id: impl Into<String>, backend: Arc<dyn Backend>) -> Self {
        self.backends.insert(id.into(), backend);
        self
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn stats(&self) -> &GatewayStats {
        &self.stats
    }

    fn backend(&self, provider: &str) -> Result<&Arc<dyn Backend>> {
        self.backends
            .get(provider)
            .ok_or_else(|| Error::Config(format!("provider `{provider}` is not configured")))
    }

    /// Serves `key` from the cache or runs `fetch` and stores its result.
    fn cached<T, F>(&self, key: CacheKey, fetch: F) -> Result<T>
    where
        T: Serialize + serde::de::DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        if let Some(cache) = &self.cache {
            if let Some(v) = cache.get(&key)? {
                if let Ok(hit) = serde_json::from_value::<T>(v) {
                    self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(hit);
                }
            }
        }
        self.stats.backend_calls.fetch_add(1, Ordering::Relaxed);
        let fresh = fetch()?;
        if let Some(cache) = &self.cache {
            cache.put(&key, &serde_json::to_value(&fresh).expect("response serializes"))?;
        }
        Ok(fresh)
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<String> {
        if req.temperature.is_nan() || req.temperature < 0.0 {
            return Err(Error::Input(format!("temperature {} must be >= 0", req.temperature)));
        }
        let backend = self.backend(&req.provider_id)?;
        let key = CacheKey::new(
            &req.provider_id,
            &req.model,
            EndpointKind::Chat,
            &Value::from(req.prompt.as_str()),
            req.temperature,
            req.run_salt,
        );
        self.cached(key, || backend.chat(&req.model, &req.prompt, req.temperature))
    }

    pub fn score_logprobs(&self, text: &str, provider: &str, model: &str) -> Result<TokenLogprobTrace> {
        if text.is_empty() {
            return Err(Error::Input("cannot score an empty text".into()));
        }
        let backend = self.backend(provider)?;
        let key = CacheKey::new(provider, model, EndpointKind::Logprobs, &json!(text), 0.0, 0);
        let trace: TokenLogprobTrace = self.cached(key, || backend.score_logprobs(model, text))?;
        if let Some(bad) = trace.tokens.iter().find(|t| t.logprob.is_nan() || t.logprob > 0.0) {
            return Err(Error::Inconsistency {
                provider: provider.to_string(),
                detail: format!("logprob {} for token {:?} is not <= 0", bad.logprob, bad.token),
            });
        }
        Ok(trace)
    }

    pub fn embed(&self, text: &str, provider: &str, model: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::Input("cannot embed an empty text".into()));
        }
        let backend = self.backend(provider)?;
        let key = CacheKey::new(provider, model, EndpointKind::Embedding, &json!(text), 0.0, 0);
        let values: Vec<f64> = self.cached(key, || backend.embed(model, text))?;
        let inconsistent = |detail: String| Error::Inconsistency {
            provider: provider.to_string(),
            detail,
        };
        if values.is_empty() || values.iter().all(|v| *v == 0.0) {
            return Err(inconsistent(format!("model `{model}` returned a zero embedding")));
        }
        let mut dims = self.embedding_dims.lock().expect("dims lock");
        let expected = *dims
            .entry((provider.to_string(), model.to_string()))
            .or_insert(values.len());
        if expected != values.len() {
            return Err(inconsistent(format!(
                "model `{model}` returned dimension {} after earlier responses of dimension {expected}",
                values.len()
            )));
        }
        Ok(EmbeddingVector {
            model: model.to_string(),
            values,
        })
    }
}

impl Default for Gateway {
    fn default() -> Self {
        Gateway::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock_gateway(dir: &std::path::Path) -> Gateway {
        let mut providers = BTreeMap::new();
        providers.insert(
            "mock".to_string(),
            ProviderConfig::Mock(MockConfig {
                logprob: Some(-std::f64::consts::LN_2),
                ..Default::default()
            }),
        );
        Gateway::from_config(&providers, Some(dir.to_path_buf())).unwrap()
    }

    #[test]
    fn repeated_chat_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let gw = mock_gateway(dir.path());
        let req = ChatRequest::new("mock", "m", "prompt text");
        let a = gw.chat(&req).unwrap();
        let b = gw.chat(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(gw.stats().backend_calls(), 1);
        assert_eq!(gw.stats().cache_hits(), 1);

        // a new gateway over the same directory still hits
        let again = mock_gateway(dir.path());
        assert_eq!(again.chat(&req).unwrap(), a);
        assert_eq!(again.stats().backend_calls(), 0);
    }

    #[test]
    fn run_salt_forces_independent_calls() {
        let dir = tempfile::tempdir().unwrap();
        let gw = mock_gateway(dir.path());
        gw.chat(&ChatRequest::new("mock", "m", "p").salted(0)).unwrap();
        gw.chat(&ChatRequest::new("mock", "m", "p").salted(1)).unwrap();
        assert_eq!(gw.stats().backend_calls(), 2);
    }

    #[test]
    fn logprob_trace_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let gw = mock_gateway(dir.path());
        let trace = gw.score_logprobs("a b c d", "mock", "m").unwrap();
        assert_eq!(trace.tokens.len(), 4);
        assert!((trace.tokens[0].logprob + std::f64::consts::LN_2).abs() < 1e-4);
        assert_eq!(gw.score_logprobs("a b c d", "mock", "m").unwrap(), trace);
        assert!(matches!(gw.score_logprobs("", "mock", "m"), Err(Error::Input(_))));
        assert!(matches!(gw.score_logprobs("x", "nope", "m"), Err(Error::Config(_))));
    }

    #[test]
    fn embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let gw = mock_gateway(dir.path());
        let a = gw.embed("same", "mock", "e").unwrap();
        assert_eq!(a, gw.embed("same", "mock", "e").unwrap());
        assert_eq!(a.dim(), 8);
        assert!(matches!(gw.embed("", "mock", "e"), Err(Error::Input(_))));
    }

    struct Shifting(AtomicUsize);

    impl Backend for Shifting {
        fn chat(&self, _: &str, _: &str, _: f64) -> Result<String> {
            unimplemented!()
        }
        fn score_logprobs(&self, _: &str, _: &str) -> Result<TokenLogprobTrace> {
            Ok(TokenLogprobTrace {
                tokens: vec![TokenLogprob {
                    token: "x".into(),
                    logprob: 0.5,
                }],
                excluded: 0,
            })
        }
        fn embed(&self, _: &str, _: &str) -> Result<Vec<f64>> {
            let n = self.0.fetch_add(1, Ordering::Relaxed);
            Ok(vec![1.0; 4 + n])
        }
    }

    #[test]
    fn dimension_change_is_inconsistency() {
        let gw = Gateway::new().with_backend("s", Arc::new(Shifting(AtomicUsize::new(0))));
        gw.embed("a", "s", "m").unwrap();
        assert!(matches!(gw.embed("b", "s", "m"), Err(Error::Inconsistency { .. })));
        assert!(matches!(
            gw.score_logprobs("a", "s", "m"),
            Err(Error::Inconsistency { .. })
        ));
    }

    #[test]
    fn negative_temperature_rejected() {
        let gw = Gateway::new().with_backend("mock", Arc::new(MockBackend::default()));
        let mut req = ChatRequest::new("mock", "m", "p");
        req.temperature = -1.0;
        assert!(matches!(gw.chat(&req), Err(Error::Input(_))));
    }
}
