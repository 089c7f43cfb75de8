//! Content-addressed on-disk response cache.
//!
//! Layout: `<root>/<provider>/<model>/<digest>.json`. Writes go to a temp file in
//! the target directory and are renamed into place, so readers never observe a
//! partially written entry.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Chat,
    Logprobs,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub provider: String,
    pub model: String,
    pub digest: String,
}

impl CacheKey {
    pub fn new(
        provider: &str,
        model: &str,
        kind: EndpointKind,
        payload: &Value,
        temperature: f64,
        run_salt: u64,
    ) -> CacheKey {
        let material = json!({
            "provider": provider,
            "model": model,
            "kind": kind,
            "payload": payload,
            "temperature": temperature,
            "run_salt": run_salt,
        });
        let bytes = serde_json::to_vec(&material).expect("key material serializes");
        CacheKey {
            provider: provider.to_string(),
            model: model.to_string(),
            digest: hex::encode(Sha256::digest(bytes)),
        }
    }
}

/// Maps an identifier to a single safe path component.
pub(crate) fn path_component(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    match cleaned.as_str() {
        "" | "." | ".." => format!("_{cleaned}"),
        _ => cleaned,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    digest: String,
    response: Value,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> ResponseCache {
        ResponseCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.root
            .join(path_component(&key.provider))
            .join(path_component(&key.model))
            .join(format!("{}.json", key.digest))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<Value>> {
        let path = self.path_for(key);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::store(path, e)),
        };
        match serde_json::from_str::<Entry>(&text) {
            Ok(entry) if entry.digest == key.digest => Ok(Some(entry.response)),
            // unreadable entries are treated as misses and overwritten on the next put
            _ => Ok(None),
        }
    }

    pub fn put(&self, key: &CacheKey, response: &Value) -> Result<()> {
        let path = self.path_for(key);
        let dir = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::store(dir, e))?;
        let entry = Entry {
            digest: key.digest.clone(),
            response: response.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&entry).expect("cache entry serializes");
        write_atomic(&path, &bytes)
    }
}

/// Writes `bytes` to `path` through a temp file + rename in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::store(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::store(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::store(path, e.error))?;
    Ok(())
}
