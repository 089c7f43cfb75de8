//! OpenAI-compatible HTTP backend: `/chat/completions`, `/completions` with
//! echoed logprobs, and `/embeddings`.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{Backend, TokenLogprob, TokenLogprobTrace};
use crate::error::{Error, Result};

const BODY_EXCERPT: usize = 300;

fn default_auth_header() -> String {
    "Authorization".into()
}

fn default_auth_scheme() -> Option<String> {
    Some("Bearer".into())
}

fn default_true() -> bool {
    true
}

fn default_attempts() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

fn default_timeout_secs() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    /// Base URL up to and including the API version, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    /// Prefix put before the credential in the auth header; `None` sends it bare.
    #[serde(default = "default_auth_scheme")]
    pub auth_scheme: Option<String>,
    /// Environment variable holding the credential. Defaults to `<PROVIDER_ID>_API_KEY`.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Whether `/completions` returns echoed prompt logprobs.
    #[serde(default = "default_true")]
    pub logprobs: bool,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

impl HttpProviderConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpProviderConfig {
            base_url: base_url.into(),
            auth_header: default_auth_header(),
            auth_scheme: default_auth_scheme(),
            api_key_env: None,
            logprobs: true,
            max_attempts: default_attempts(),
            backoff_ms: default_backoff_ms(),
            timeout_secs: default_timeout_secs(),
        }
    }
}

/// `openai` -> `OPENAI_API_KEY`, `my-proxy` -> `MY_PROXY_API_KEY`.
pub fn default_key_env(provider_id: &str) -> String {
    let stem: String = provider_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("{stem}_API_KEY")
}

pub struct OpenAiBackend {
    provider_id: String,
    config: HttpProviderConfig,
    credential: Option<String>,
    client: Client,
}

impl OpenAiBackend {
    pub fn new(provider_id: &str, config: HttpProviderConfig) -> Result<Self> {
        let env = config
            .api_key_env
            .clone()
            .unwrap_or_else(|| default_key_env(provider_id));
        let credential = std::env::var(&env).ok().filter(|v| !v.is_empty());
        if credential.is_none() {
            warn!(provider = provider_id, env = %env, "no credential set; sending requests without auth");
        }
        Self::with_credential(provider_id, config, credential)
    }

    pub fn with_credential(provider_id: &str, config: HttpProviderConfig, credential: Option<String>) -> Result<Self> {
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(OpenAiBackend {
            provider_id: provider_id.to_string(),
            config,
            credential,
            client,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = self.url(path);
        let attempts = self.config.max_attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.credential {
                let value = match &self.config.auth_scheme {
                    Some(scheme) => format!("{scheme} {key}"),
                    None => key.clone(),
                };
                req = req.header(self.config.auth_header.as_str(), value);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => {
                    debug!(provider = %self.provider_id, attempt, error = %e, "transport failure");
                    last = Some(Error::ProviderTransport {
                        provider: self.provider_id.clone(),
                        detail: e.to_string(),
                    });
                    continue;
                }
            };
            let status = resp.status();
            let text = resp.text().unwrap_or_default();
            if status.is_success() {
                return serde_json::from_str(&text).map_err(|e| Error::Inconsistency {
                    provider: self.provider_id.clone(),
                    detail: format!("response from {path} is not JSON: {e}"),
                });
            }
            let err = Error::ProviderStatus {
                provider: self.provider_id.clone(),
                status: status.as_u16(),
                body: text.chars().take(BODY_EXCERPT).collect(),
            };
            if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
                debug!(provider = %self.provider_id, attempt, %status, "retryable status");
                last = Some(err);
                continue;
            }
            return Err(err);
        }
        Err(last.expect("at least one attempt"))
    }

    fn malformed(&self, what: &str) -> Error {
        Error::Inconsistency {
            provider: self.provider_id.clone(),
            detail: format!("malformed response: {what}"),
        }
    }
}

impl Backend for OpenAiBackend {
    fn chat(&self, model: &str, prompt: &str, temperature: f64) -> Result<String> {
        let body = json!({
            "model": model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        });
        let resp = self.post("chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| self.malformed("missing choices[0].message.content"))
    }

    fn score_logprobs(&self, model: &str, text: &str) -> Result<TokenLogprobTrace> {
        if !self.config.logprobs {
            return Err(Error::Capability {
                provider: self.provider_id.clone(),
                detail: "provider is configured without logprob support".into(),
            });
        }
        let body = json!({
            "model": model,
            "prompt": text,
            "max_tokens": 1,
            "echo": true,
            "logprobs": 1,
            "temperature": 0.0,
        });
        let resp = self.post("completions", &body)?;
        let lp = resp
            .pointer("/choices/0/logprobs")
            .filter(|v| !v.is_null())
            .ok_or_else(|| Error::Capability {
                provider: self.provider_id.clone(),
                detail: "completion response carries no logprobs".into(),
            })?;
        let tokens = lp
            .get("tokens")
            .and_then(Value::as_array)
            .ok_or_else(|| self.malformed("logprobs.tokens"))?;
        let logprobs = lp
            .get("token_logprobs")
            .and_then(Value::as_array)
            .ok_or_else(|| self.malformed("logprobs.token_logprobs"))?;
        if tokens.len() != logprobs.len() {
            return Err(self.malformed("tokens and token_logprobs differ in length"));
        }
        let offsets: Option<Vec<u64>> = lp
            .get("text_offset")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_u64).collect());

        let mut trace = TokenLogprobTrace::default();
        let mut covered = 0usize;
        for (i, (tok, lp)) in tokens.iter().zip(logprobs).enumerate() {
            let token = tok.as_str().ok_or_else(|| self.malformed("non-string token"))?;
            let start = match &offsets {
                Some(o) if o.len() == tokens.len() => o[i] as usize,
                _ => covered,
            };
            // the echoed prompt ends where generated tokens begin
            if start >= text.len() {
                break;
            }
            covered = start + token.len();
            match lp.as_f64() {
                None => trace.excluded += 1,
                Some(v) if v > 1e-6 => {
                    return Err(Error::Inconsistency {
                        provider: self.provider_id.clone(),
                        detail: format!("positive logprob {v} for token {token:?}"),
                    })
                }
                Some(v) => trace.tokens.push(TokenLogprob {
                    token: token.to_string(),
                    logprob: v.min(0.0),
                }),
            }
        }
        Ok(trace)
    }

    fn embed(&self, model: &str, text: &str) -> Result<Vec<f64>> {
        let body = json!({"model": model, "input": text});
        let resp = self.post("embeddings", &body)?;
        let values = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| self.malformed("missing data[0].embedding"))?;
        values
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| self.malformed("non-numeric embedding component"))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_env_names() {
        assert_eq!(default_key_env("openai"), "OPENAI_API_KEY");
        assert_eq!(default_key_env("my-proxy"), "MY_PROXY_API_KEY");
    }

    #[test]
    fn config_defaults_from_toml() {
        let c: HttpProviderConfig = toml::from_str("base_url = \"http://localhost:8000/v1\"").unwrap();
        assert_eq!(c.auth_header, "Authorization");
        assert_eq!(c.auth_scheme.as_deref(), Some("Bearer"));
        assert_eq!(c.max_attempts, 3);
        assert!(c.logprobs);
    }

    #[test]
    fn capability_error_when_logprobs_disabled() {
        let mut c = HttpProviderConfig::new("http://127.0.0.1:9");
        c.logprobs = false;
        let b = OpenAiBackend::with_credential("p", c, None).unwrap();
        assert!(matches!(b.score_logprobs("m", "text"), Err(Error::Capability { .. })));
    }
}
