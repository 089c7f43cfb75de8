use std::path::{Path, PathBuf};

use narreval_core::extraction::parse_extraction;
use serde::Deserialize;

const DEFAULT_FEATURES: &[&str] = &[
    "Goal Scored",
    "Ball Possession %",
    "Attempts",
    "On-Target",
    "Corners",
    "Yellow Card",
];

#[derive(Deserialize)]
struct Expected {
    #[serde(default)]
    features: Option<Vec<String>>,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    error: bool,
    #[serde(default)]
    entries: Vec<ExpectedEntry>,
    #[serde(default)]
    anomalies: Vec<(String, String)>,
}

#[derive(Deserialize)]
struct ExpectedEntry {
    feature_name: String,
    rank: Option<i64>,
    sign: Option<i8>,
    value: Option<f64>,
    assumption: Option<String>,
}

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/extraction")
}

pub fn cases() -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    out.sort();
    out
}

/// Mismatches between the parser and the hand-written expectation of one case.
pub fn check(raw_path: &Path) -> Vec<String> {
    let raw = std::fs::read_to_string(raw_path).unwrap();
    let exp: Expected =
        serde_json::from_str(&std::fs::read_to_string(raw_path.with_extension("json")).unwrap()).unwrap();
    let features: Vec<String> = exp
        .features
        .clone()
        .unwrap_or_else(|| DEFAULT_FEATURES.iter().map(|s| s.to_string()).collect());
    let mut problems = Vec::new();
    let record = match parse_extraction(&raw, &features, exp.n.unwrap_or(4)) {
        Ok(r) if exp.error => return vec![format!("expected a parse error, got {} entries", r.entries.len())],
        Ok(r) => r,
        Err(_) if exp.error => return problems,
        Err(e) => return vec![format!("unexpected error: {e}")],
    };
    if record.entries.len() != exp.entries.len() {
        problems.push(format!(
            "{} entries, expected {}",
            record.entries.len(),
            exp.entries.len()
        ));
    }
    for (got, want) in record.entries.iter().zip(&exp.entries) {
        let value_ok = match (got.value, want.value) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-12 * b.abs().max(1.0),
            (a, b) => a == b,
        };
        if got.feature_name != want.feature_name
            || got.rank != want.rank
            || got.sign.map(|s| s.as_i8()) != want.sign
            || !value_ok
            || got.assumption != want.assumption
        {
            problems.push(format!(
                "entry {:?}/{:?}/{:?}/{:?}/{:?} expected {:?}/{:?}/{:?}/{:?}/{:?}",
                got.feature_name,
                got.rank,
                got.sign.map(|s| s.as_i8()),
                got.value,
                got.assumption,
                want.feature_name,
                want.rank,
                want.sign,
                want.value,
                want.assumption
            ));
        }
    }
    let anomalies: Vec<(String, String)> = record
        .anomalies
        .iter()
        .map(|a| (a.kind.to_string(), a.feature_name.clone()))
        .collect();
    if anomalies != exp.anomalies {
        problems.push(format!("anomalies {anomalies:?}, expected {:?}", exp.anomalies));
    }
    problems
}
