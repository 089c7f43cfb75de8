//! Error type shared across the harness.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad `n`, missing template, unknown provider.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid caller input: empty text, malformed instance file, etc.
    #[error("input error: {0}")]
    Input(String),

    /// A truncated-table row with a SHAP value of exactly zero has no sign.
    #[error("degenerate sign: feature `{feature}` has a SHAP value of exactly 0")]
    DegenerateSign { feature: String },

    #[error("provider `{provider}` returned HTTP {status}: {body}")]
    ProviderStatus {
        provider: String,
        status: u16,
        body: String,
    },

    #[error("provider `{provider}` transport failure: {detail}")]
    ProviderTransport { provider: String, detail: String },

    /// The backend does not offer the requested endpoint (e.g. no logprobs).
    #[error("provider `{provider}` lacks capability: {detail}")]
    Capability { provider: String, detail: String },

    /// A backend answered in a way that contradicts earlier answers or the wire contract.
    #[error("provider `{provider}` inconsistency: {detail}")]
    Inconsistency { provider: String, detail: String },

    /// No JSON object could be located in an extraction reply.
    #[error("extraction parse failure: {0}")]
    Parse(String),

    #[error("store I/O error at {path}: {source}")]
    Store {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("incomplete slice: {} missing cell(s), first: {}", .gaps.len(), .gaps.first().map(String::as_str).unwrap_or("-"))]
    IncompleteSlice { gaps: Vec<String> },
}

impl Error {
    pub fn store(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Store {
            path: path.into(),
            source,
        }
    }

    /// True for errors raised by a model backend (status, transport, capability, inconsistency).
    pub fn is_provider(&self) -> bool {
        matches!(
            self,
            Error::ProviderStatus { .. }
                | Error::ProviderTransport { .. }
                | Error::Capability { .. }
                | Error::Inconsistency { .. }
        )
    }
}
