//! Deterministic offline backend.
//!
//! Chat runs in "faithful encoder" mode: a generation prompt (recognized by its
//! rendered table rows) is answered with a pseudo-narrative that spells out the
//! rank, sign, value and an assumption for every row of the table it was given,
//! and an extraction prompt is answered by decoding such a pseudo-narrative back
//! into extraction JSON. Anything else gets a reply derived from the prompt hash.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::{Backend, TokenLogprob, TokenLogprobTrace};
use crate::error::{Error, Result};
use crate::explanation::Sign;
use crate::prompt::narrative_from_extraction_prompt;

pub const DEFAULT_MOCK_DIM: usize = 8;

fn default_dim() -> usize {
    DEFAULT_MOCK_DIM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    /// Constant per-token logprob; when unset, logprobs are derived from token hashes.
    #[serde(default)]
    pub logprob: Option<f64>,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            logprob: None,
            embedding_dim: DEFAULT_MOCK_DIM,
        }
    }
}

static TABLE_ROW: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?m)^(?P<name>[^\n|]+?) \| (?P<shap>-?\d+\.\d{3}) \| (?P<value>-?\d+(?:\.\d+)?) \| (?P<avg>-?\d+(?:\.\d+)?) \| [^\n]*$")
        .unwrap()
});
static CLAIM: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"Feature «(?P<name>[^»]+)» holds rank (?P<rank>\d+) and pushes the class 1 score (?P<dir>up|down), with a value of (?P<value>-?\d+(?:\.\d+)?)\.")
        .unwrap()
});
static ASSUMPTION: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?m)^Assumption for «(?P<name>[^»]+)»: (?P<text>[^\n]+)$").unwrap());
static TOKEN: Lazy<Regex> = Lazy::new(|| Regex::new(r"\s*\S+").unwrap());

#[derive(Debug, Clone, PartialEq)]
struct ParsedRow {
    name: String,
    shap: f64,
    value: String,
    average: f64,
}

fn parse_table_rows(prompt: &str) -> Vec<ParsedRow> {
    TABLE_ROW
        .captures_iter(prompt)
        .filter_map(|c| {
            Some(ParsedRow {
                name: c["name"].trim().to_string(),
                shap: c["shap"].parse().ok()?,
                value: c["value"].to_string(),
                average: c["avg"].parse().ok()?,
            })
        })
        .collect()
}

fn assumption_for(name: &str, sign: Sign, above_average: bool) -> String {
    let level = if above_average { "high" } else { "low" };
    let effect = match sign {
        Sign::Positive => "raises",
        Sign::Negative => "lowers",
    };
    format!("A {level} value of {name} plausibly {effect} the chance of class 1.")
}

/// The pseudo-narrative the faithful encoder writes for a set of table rows.
fn encode_narrative(rows: &[ParsedRow]) -> String {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].shap.abs().total_cmp(&rows[a].shap.abs()));
    let mut lines = vec![format!(
        "This narrative explains the prediction for class 1 through its {} most important features.",
        rows.len()
    )];
    for (rank, &i) in order.iter().enumerate() {
        let row = &rows[i];
        let sign = Sign::of(row.shap).unwrap_or(Sign::Positive);
        let dir = if sign == Sign::Positive { "up" } else { "down" };
        lines.push(format!(
            "Feature «{}» holds rank {rank} and pushes the class 1 score {dir}, with a value of {}.",
            row.name, row.value
        ));
        let above = row.value.parse::<f64>().map_or(true, |v| v >= row.average);
        lines.push(format!(
            "Assumption for «{}»: {}",
            row.name,
            assumption_for(&row.name, sign, above)
        ));
    }
    lines.join("\n")
}

/// Extraction JSON for a pseudo-narrative; `{}` when the text holds no claims.
fn decode_narrative(narrative: &str) -> String {
    let mut map = Map::new();
    for c in CLAIM.captures_iter(narrative) {
        let name = c["name"].to_string();
        let sign = if &c["dir"] == "up" { 1 } else { -1 };
        let rank: i64 = c["rank"].parse().unwrap_or(0);
        let value = c["value"]
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map_or(Value::from("None"), Value::Number);
        let assumption = ASSUMPTION
            .captures_iter(narrative)
            .find(|a| a["name"] == *name)
            .map_or_else(|| "None".to_string(), |a| a["text"].to_string());
        let mut obj = Map::new();
        obj.insert("rank".into(), Value::from(rank));
        obj.insert("sign".into(), Value::from(sign));
        obj.insert("value".into(), value);
        obj.insert("assumption".into(), Value::from(assumption));
        map.insert(name, Value::Object(obj));
    }
    serde_json::to_string_pretty(&Value::Object(map)).expect("json serializes")
}

fn sha(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    config: MockConfig,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        MockBackend { config }
    }
}

impl Backend for MockBackend {
    fn chat(&self, _model: &str, prompt: &str, _temperature: f64) -> Result<String> {
        if let Some(narrative) = narrative_from_extraction_prompt(prompt) {
            return Ok(decode_narrative(&narrative));
        }
        let rows = parse_table_rows(prompt);
        if !rows.is_empty() {
            return Ok(encode_narrative(&rows));
        }
        let digest = sha(&[prompt.as_bytes()]);
        Ok(format!("Mock reply {}.", hex::encode(&digest[..8])))
    }

    fn score_logprobs(&self, _model: &str, text: &str) -> Result<TokenLogprobTrace> {
        let tokens = TOKEN
            .find_iter(text)
            .map(|m| {
                let logprob = match self.config.logprob {
                    Some(lp) => lp,
                    None => {
                        let d = sha(&[m.as_str().trim().as_bytes()]);
                        let bucket = u16::from_le_bytes([d[0], d[1]]) % 1000;
                        -(0.05 + f64::from(bucket) * 0.004)
                    }
                };
                TokenLogprob {
                    token: m.as_str().to_string(),
                    logprob,
                }
            })
            .collect();
        Ok(TokenLogprobTrace { tokens, excluded: 0 })
    }

    fn embed(&self, model: &str, text: &str) -> Result<Vec<f64>> {
        let dim = self.config.embedding_dim;
        if dim == 0 {
            return Err(Error::Config(format!("mock embedding model `{model}` has dimension 0")));
        }
        let mut v: Vec<f64> = (0..dim as u32)
            .map(|i| {
                let d = sha(&[text.as_bytes(), &i.to_le_bytes()]);
                let x = u32::from_le_bytes([d[0], d[1], d[2], d[3]]);
                f64::from(x) / f64::from(u32::MAX) * 2.0 - 1.0
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}
