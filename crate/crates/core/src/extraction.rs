//! Parsing of extraction-model replies into [`ExtractionRecord`]s.
//!
//! Parsing is total: any input yields either a record or [`Error::Parse`] when
//! no JSON object can be located. Everything questionable inside a located
//! object becomes an [`Anomaly`] on the record instead of an error.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::explanation::Sign;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtraction {
    pub feature_name: String,
    /// `None` when the narrative implies no rank (φ) or the field was unusable.
    pub rank: Option<i64>,
    pub sign: Option<Sign>,
    pub value: Option<f64>,
    pub assumption: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    UnknownFeature,
    DuplicateRank,
    RankOutOfRange,
    MissingField,
    UnparseableValue,
    /// Two entries resolved to the same feature; only the first is kept.
    DuplicateFeature,
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AnomalyKind::UnknownFeature => "unknown_feature",
            AnomalyKind::DuplicateRank => "duplicate_rank",
            AnomalyKind::RankOutOfRange => "rank_out_of_range",
            AnomalyKind::MissingField => "missing_field",
            AnomalyKind::UnparseableValue => "unparseable_value",
            AnomalyKind::DuplicateFeature => "duplicate_feature",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anomaly {
    pub kind: AnomalyKind,
    pub feature_name: String,
    pub detail: String,
}

impl Anomaly {
    fn new(kind: AnomalyKind, feature: &str, detail: impl Into<String>) -> Self {
        Anomaly {
            kind,
            feature_name: feature.to_string(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub entries: Vec<FeatureExtraction>,
    pub anomalies: Vec<Anomaly>,
    /// Set when no usable extraction could be obtained; `entries` is then empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ExtractionRecord {
    pub fn failed(reason: impl Into<String>) -> Self {
        ExtractionRecord {
            failure: Some(reason.into()),
            ..Default::default()
        }
    }

    pub fn is_failure(&self) -> bool {
        self.failure.is_some()
    }

    pub fn get(&self, feature: &str) -> Option<&FeatureExtraction> {
        self.entries.iter().find(|e| e.feature_name == feature)
    }

    /// The dictionary form an extraction model is asked to produce.
    pub fn to_extraction_json(&self) -> Value {
        let mut map = Map::new();
        for e in &self.entries {
            let mut obj = Map::new();
            obj.insert("rank".into(), e.rank.map_or(Value::Null, Value::from));
            obj.insert("sign".into(), e.sign.map_or(Value::Null, |s| Value::from(s.as_i8())));
            obj.insert(
                "value".into(),
                e.value
                    .and_then(serde_json::Number::from_f64)
                    .map_or_else(|| Value::from("None"), Value::Number),
            );
            obj.insert(
                "assumption".into(),
                Value::from(e.assumption.clone().unwrap_or_else(|| "None".into())),
            );
            map.insert(e.feature_name.clone(), Value::Object(obj));
        }
        Value::Object(map)
    }
}

static FENCE: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?s)```[A-Za-z]*[ \t]*\n?(.*?)```").unwrap());
static NUMBER: Lazy<Regex> = Lazy::new(|| Regex::new(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?").unwrap());
static THOUSANDS: Lazy<Regex> = Lazy::new(|| Regex::new(r"(\d),(\d{3})").unwrap());

/// First balanced `{...}` starting at byte `start`, honouring JSON strings.
fn balanced_object(s: &str, start: usize) -> Option<&str> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(&s[start..=start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_candidate(text: &str) -> Option<Value> {
    match serde_json::from_str::<Value>(text.trim()) {
        Ok(v @ (Value::Object(_) | Value::Array(_))) => Some(v),
        _ => None,
    }
}

/// Locates the JSON payload of a reply that may be wrapped in prose or code fences.
pub fn locate_json(raw: &str) -> Option<Value> {
    for cap in FENCE.captures_iter(raw) {
        if let Some(v) = parse_candidate(&cap[1]) {
            return Some(v);
        }
    }
    if let Some(v) = parse_candidate(raw) {
        return Some(v);
    }
    if let (Some(first), Some(last)) = (raw.find('{'), raw.rfind('}')) {
        if first < last {
            if let Some(v) = parse_candidate(&raw[first..=last]) {
                return Some(v);
            }
        }
    }
    for (i, _) in raw.match_indices('{') {
        if let Some(v) = balanced_object(raw, i).and_then(parse_candidate) {
            return Some(v);
        }
    }
    None
}

const WRAPPER_KEYS: &[&str] = &["features", "extraction", "extractions", "result", "results"];
const NAME_KEYS: &[&str] = &["feature", "feature_name", "name"];

fn unwrap_payload(value: Value) -> Value {
    if let Value::Object(map) = &value {
        if map.len() == 1 {
            let (k, inner) = map.iter().next().expect("one entry");
            if WRAPPER_KEYS.contains(&k.to_ascii_lowercase().as_str()) && (inner.is_object() || inner.is_array()) {
                return inner.clone();
            }
        }
    }
    value
}

fn lookup<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key).or_else(|| {
        obj.iter()
            .find(|(k, _)| k.trim().eq_ignore_ascii_case(key))
            .map(|(_, v)| v)
    })
}

fn is_null_word(s: &str) -> bool {
    matches!(
        s.trim().to_ascii_lowercase().as_str(),
        "" | "none" | "null" | "n/a" | "na" | "nan" | "φ" | "phi"
    )
}

enum Field<T> {
    Present(T),
    Null,
    Bad(String),
}

fn parse_rank(v: &Value) -> Field<i64> {
    match v {
        Value::Null => Field::Null,
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Field::Present(i)
            } else {
                match n.as_f64() {
                    Some(f) if f.fract() == 0.0 && f.abs() < 1e15 => Field::Present(f as i64),
                    _ => Field::Bad(format!("rank {n} is not an integer")),
                }
            }
        }
        Value::String(s) if is_null_word(s) => Field::Null,
        Value::String(s) => {
            let t = s.trim().trim_start_matches('#');
            t.parse::<i64>()
                .map(Field::Present)
                .unwrap_or_else(|_| Field::Bad(format!("rank {s:?} is not an integer")))
        }
        other => Field::Bad(format!("rank {other} is not an integer")),
    }
}

fn sign_of_number(f: f64) -> Field<Sign> {
    match Sign::of(f) {
        Some(s) => Field::Present(s),
        None => Field::Bad(format!("sign {f} is neither positive nor negative")),
    }
}

fn parse_sign(v: &Value) -> Field<Sign> {
    match v {
        Value::Null => Field::Null,
        Value::Number(n) => sign_of_number(n.as_f64().unwrap_or(0.0)),
        Value::String(s) if is_null_word(s) => Field::Null,
        Value::String(s) => {
            let t = s.trim().to_ascii_lowercase();
            if t == "+" || t.starts_with("pos") || t.starts_with("increas") {
                Field::Present(Sign::Positive)
            } else if t == "-" || t == "−" || t.starts_with("neg") || t.starts_with("decreas") {
                Field::Present(Sign::Negative)
            } else {
                match t.replace('−', "-").parse::<f64>() {
                    Ok(f) => sign_of_number(f),
                    Err(_) => Field::Bad(format!("sign {s:?} not understood")),
                }
            }
        }
        other => Field::Bad(format!("sign {other} not understood")),
    }
}

/// Normalizes a quoted value: strips currency and percent symbols and thousands
/// separators, then takes the first number. `"57.2%"` becomes `57.2`.
pub fn normalize_value_text(s: &str) -> Option<f64> {
    let cleaned: String = s
        .replace('−', "-")
        .chars()
        .filter(|c| !matches!(c, '$' | '€' | '£' | '¥' | '%'))
        .collect();
    let mut cleaned = cleaned;
    loop {
        let next = THOUSANDS.replace_all(&cleaned, "$1$2").into_owned();
        if next == cleaned {
            break;
        }
        cleaned = next;
    }
    NUMBER
        .find(&cleaned)
        .and_then(|m| m.as_str().parse::<f64>().ok())
        .filter(|f| f.is_finite())
}

fn parse_value(v: &Value) -> Field<f64> {
    match v {
        Value::Null => Field::Null,
        Value::Number(n) => match n.as_f64() {
            Some(f) if f.is_finite() => Field::Present(f),
            _ => Field::Bad(format!("value {n} is not finite")),
        },
        Value::String(s) if is_null_word(s) => Field::Null,
        Value::String(s) => match normalize_value_text(s) {
            Some(f) => Field::Present(f),
            None => Field::Bad(format!("value {s:?} has no number")),
        },
        other => Field::Bad(format!("value {other} is not numeric")),
    }
}

fn parse_assumption(v: &Value) -> Field<String> {
    match v {
        Value::Null => Field::Null,
        Value::String(s) if is_null_word(s) => Field::Null,
        Value::String(s) => Field::Present(s.trim().to_string()),
        other => Field::Bad(format!("assumption {other} is not a sentence")),
    }
}

fn normalized_name(s: &str) -> String {
    s.split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Maps an extracted key onto the canonical feature name, tolerating case,
/// whitespace, underscores and hyphens. Ambiguous or absent matches stay as-is.
fn resolve_name(raw: &str, feature_set: &[String]) -> String {
    if feature_set.iter().any(|f| f == raw) {
        return raw.to_string();
    }
    let key = normalized_name(raw);
    let mut hits = feature_set.iter().filter(|f| normalized_name(f) == key);
    match (hits.next(), hits.next()) {
        (Some(f), None) => f.clone(),
        _ => raw.trim().to_string(),
    }
}

fn field<T>(
    obj: &Map<String, Value>,
    key: &str,
    feature: &str,
    parse: fn(&Value) -> Field<T>,
    null_is_missing: bool,
    anomalies: &mut Vec<Anomaly>,
) -> Option<T> {
    let Some(v) = lookup(obj, key) else {
        anomalies.push(Anomaly::new(
            AnomalyKind::MissingField,
            feature,
            format!("no `{key}` field"),
        ));
        return None;
    };
    match parse(v) {
        Field::Present(x) => Some(x),
        Field::Null => {
            if null_is_missing {
                anomalies.push(Anomaly::new(
                    AnomalyKind::MissingField,
                    feature,
                    format!("`{key}` is null"),
                ));
            }
            None
        }
        Field::Bad(detail) => {
            anomalies.push(Anomaly::new(AnomalyKind::UnparseableValue, feature, detail));
            None
        }
    }
}

fn entry_from_object(name: String, obj: &Map<String, Value>, anomalies: &mut Vec<Anomaly>) -> FeatureExtraction {
    let rank = field(obj, "rank", &name, parse_rank, true, anomalies);
    let sign = field(obj, "sign", &name, parse_sign, true, anomalies);
    let value = field(obj, "value", &name, parse_value, false, anomalies);
    let assumption = field(obj, "assumption", &name, parse_assumption, false, anomalies);
    FeatureExtraction {
        feature_name: name,
        rank,
        sign,
        value,
        assumption,
    }
}

/// Parses an extraction reply against the full feature set and truncation size `n`.
pub fn parse_extraction(raw: &str, feature_set: &[String], n: usize) -> Result<ExtractionRecord> {
    let payload = locate_json(raw)
        .map(unwrap_payload)
        .ok_or_else(|| Error::Parse("no JSON object found in extraction reply".into()))?;

    let mut raw_entries: Vec<(String, Value)> = Vec::new();
    match payload {
        Value::Object(map) => raw_entries.extend(map),
        Value::Array(items) => {
            for item in items {
                let name = item
                    .as_object()
                    .and_then(|o| NAME_KEYS.iter().find_map(|k| lookup(o, k)))
                    .and_then(Value::as_str)
                    .map(str::to_string);
                match name {
                    Some(name) => raw_entries.push((name, item)),
                    None => return Err(Error::Parse("extraction list entry without a feature name".into())),
                }
            }
        }
        _ => unreachable!("locate_json yields objects or arrays"),
    }

    let mut anomalies = Vec::new();
    let mut entries: Vec<FeatureExtraction> = Vec::new();
    for (raw_name, value) in raw_entries {
        let name = resolve_name(&raw_name, feature_set);
        if entries.iter().any(|e| e.feature_name == name) {
            anomalies.push(Anomaly::new(
                AnomalyKind::DuplicateFeature,
                &name,
                format!("repeated entry `{raw_name}` ignored"),
            ));
            continue;
        }
        let entry = match &value {
            Value::Object(obj) => entry_from_object(name, obj, &mut anomalies),
            other => {
                anomalies.push(Anomaly::new(
                    AnomalyKind::MissingField,
                    &name,
                    format!("entry is {other} instead of an object"),
                ));
                FeatureExtraction {
                    feature_name: name,
                    rank: None,
                    sign: None,
                    value: None,
                    assumption: None,
                }
            }
        };
        entries.push(entry);
    }

    let mut record = ExtractionRecord {
        entries,
        anomalies,
        failure: None,
    };
    let structural = validate(&record, feature_set, n);
    record.anomalies.extend(structural);
    Ok(record)
}

/// Unknown features, out-of-range ranks and duplicate ranks. Does not modify the record.
pub fn validate(record: &ExtractionRecord, feature_set: &[String], n: usize) -> Vec<Anomaly> {
    let mut out = Vec::new();
    let mut by_rank: BTreeMap<i64, Vec<&str>> = BTreeMap::new();
    let mut first_seen: HashMap<i64, usize> = HashMap::new();
    for (pos, e) in record.entries.iter().enumerate() {
        if !feature_set.contains(&e.feature_name) {
            out.push(Anomaly::new(
                AnomalyKind::UnknownFeature,
                &e.feature_name,
                "feature is not part of the model's feature set",
            ));
            continue;
        }
        if let Some(rank) = e.rank {
            if rank < 0 || rank >= n as i64 {
                out.push(Anomaly::new(
                    AnomalyKind::RankOutOfRange,
                    &e.feature_name,
                    format!("rank {rank} outside 0..{n}"),
                ));
            }
            by_rank.entry(rank).or_default().push(&e.feature_name);
            first_seen.entry(rank).or_insert(pos);
        }
    }
    let mut dups: Vec<(usize, i64, Vec<&str>)> = by_rank
        .into_iter()
        .filter(|(_, names)| names.len() > 1)
        .map(|(rank, names)| (first_seen[&rank], rank, names))
        .collect();
    dups.sort();
    for (_, rank, names) in dups {
        out.push(Anomaly::new(
            AnomalyKind::DuplicateRank,
            names[1],
            format!("rank {rank} shared by {}", names.join(", ")),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features() -> Vec<String> {
        ["Goal Scored", "Ball Possession %", "Attempts", "On-Target", "Corners"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn kinds(r: &ExtractionRecord) -> Vec<AnomalyKind> {
        r.anomalies.iter().map(|a| a.kind).collect()
    }

    const FIG3: &str = r#"{
      "Goal Scored": {"rank": 0, "sign": 1, "value": 2, "assumption": "Scoring goals usually signals a standout player performance."},
      "Ball Possession %": {"rank": 1, "sign": -1, "value": 38, "assumption": "None"},
      "Attempts": {"rank": 2, "sign": 1, "value": "None", "assumption": "Many attempts show attacking intent."},
      "On-Target": {"rank": 3, "sign": -1, "value": 4, "assumption": "None"}
    }"#;

    #[test]
    fn dictionary_with_four_features() {
        let r = parse_extraction(FIG3, &features(), 4).unwrap();
        assert_eq!(r.entries.len(), 4);
        assert!(r.anomalies.is_empty(), "{:?}", r.anomalies);
        let g = r.get("Goal Scored").unwrap();
        assert_eq!((g.rank, g.sign, g.value), (Some(0), Some(Sign::Positive), Some(2.0)));
        assert_eq!(r.get("Attempts").unwrap().value, None);
        assert_eq!(r.get("On-Target").unwrap().sign, Some(Sign::Negative));
    }

    #[test]
    fn none_strings_become_null() {
        let raw = r#"{"Attempts": {"rank":0,"sign":1,"value":"None","assumption":"None"}}"#;
        let r = parse_extraction(raw, &features(), 4).unwrap();
        let e = &r.entries[0];
        assert_eq!(e.value, None);
        assert_eq!(e.assumption, None);
        assert!(r.anomalies.is_empty());
    }

    #[test]
    fn unknown_feature_is_retained_and_flagged() {
        let raw = r#"{"Luck": {"rank":0,"sign":1,"value":"None","assumption":"Fortune favours the bold."}}"#;
        let r = parse_extraction(raw, &features(), 4).unwrap();
        assert_eq!(r.entries[0].feature_name, "Luck");
        assert_eq!(kinds(&r), vec![AnomalyKind::UnknownFeature]);
    }

    #[test]
    fn validate_examples() {
        let mk = |ranks: &[i64]| ExtractionRecord {
            entries: ranks
                .iter()
                .zip(features())
                .map(|(&r, f)| FeatureExtraction {
                    feature_name: f,
                    rank: Some(r),
                    sign: Some(Sign::Positive),
                    value: None,
                    assumption: None,
                })
                .collect(),
            ..Default::default()
        };
        assert!(validate(&mk(&[0, 1, 2, 3]), &features(), 4).is_empty());
        let dup = validate(&mk(&[0, 0, 2, 3]), &features(), 4);
        assert_eq!(
            dup.iter().map(|a| a.kind).collect::<Vec<_>>(),
            vec![AnomalyKind::DuplicateRank]
        );
        assert_eq!(dup[0].feature_name, "Ball Possession %");
        let out = validate(&mk(&[0, 1, 2, 7]), &features(), 4);
        assert_eq!(
            out.iter().map(|a| a.kind).collect::<Vec<_>>(),
            vec![AnomalyKind::RankOutOfRange]
        );
    }

    #[test]
    fn prose_and_fences_are_tolerated() {
        let raw = format!("Sure! Here is the extraction:\n```json\n{FIG3}\n```\nLet me know.");
        assert_eq!(parse_extraction(&raw, &features(), 4).unwrap().entries.len(), 4);
        let raw = format!("Result: {FIG3} -- done");
        assert_eq!(parse_extraction(&raw, &features(), 4).unwrap().entries.len(), 4);
    }

    #[test]
    fn no_json_is_parse_failure() {
        assert!(matches!(
            parse_extraction("I cannot help with that.", &features(), 4),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            parse_extraction("{broken", &features(), 4),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn value_normalization() {
        assert_eq!(normalize_value_text("57.2%"), Some(57.2));
        assert_eq!(normalize_value_text("$1,234,567.50"), Some(1234567.5));
        assert_eq!(normalize_value_text("2 goals"), Some(2.0));
        assert_eq!(normalize_value_text("−3.5"), Some(-3.5));
        assert_eq!(normalize_value_text("high"), None);
    }

    #[test]
    fn sign_words() {
        let raw = r#"{"Attempts": {"rank":"1","sign":"positive","value":"1,000","assumption":null},
                      "Corners": {"rank":2.0,"sign":"Negative","value":3,"assumption":"None"}}"#;
        let r = parse_extraction(raw, &features(), 4).unwrap();
        assert_eq!(r.entries[0].sign, Some(Sign::Positive));
        assert_eq!(r.entries[0].rank, Some(1));
        assert_eq!(r.entries[0].value, Some(1000.0));
        assert_eq!(r.entries[1].sign, Some(Sign::Negative));
        assert_eq!(r.entries[1].rank, Some(2));
        assert!(r.anomalies.is_empty());
    }

    #[test]
    fn feature_names_are_resolved_loosely() {
        let raw = r#"{"goal_scored": {"rank":0,"sign":1,"value":1,"assumption":"None"}}"#;
        let r = parse_extraction(raw, &features(), 4).unwrap();
        assert_eq!(r.entries[0].feature_name, "Goal Scored");
        assert!(r.anomalies.is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_entry(name: String) -> impl Strategy<Value = FeatureExtraction> {
            (
                prop::option::of(0i64..6),
                prop::option::of(prop_oneof![Just(Sign::Positive), Just(Sign::Negative)]),
                prop::option::of(-1e6f64..1e6),
                prop::option::of("[A-Za-z][A-Za-z ,']{0,40}[a-z]\\."),
            )
                .prop_map(move |(rank, sign, value, assumption)| FeatureExtraction {
                    feature_name: name.clone(),
                    rank,
                    sign,
                    value,
                    assumption,
                })
        }

        fn arb_record() -> impl Strategy<Value = ExtractionRecord> {
            prop::sample::subsequence(features(), 0..=5)
                .prop_flat_map(|names| names.into_iter().map(arb_entry).collect::<Vec<_>>())
                .prop_map(|entries| ExtractionRecord {
                    entries,
                    ..Default::default()
                })
        }

        proptest! {
            #[test]
            fn parse_inverts_serialize(record in arb_record()) {
                let text = serde_json::to_string(&record.to_extraction_json()).unwrap();
                let parsed = parse_extraction(&text, &features(), 6).unwrap();
                prop_assert_eq!(&parsed.entries, &record.entries);
                let missing: Vec<_> = parsed.anomalies.iter()
                    .filter(|a| a.kind != AnomalyKind::DuplicateRank)
                    .filter(|a| !(a.kind == AnomalyKind::MissingField))
                    .collect();
                prop_assert!(missing.is_empty(), "{:?}", missing);
            }

            #[test]
            fn parsing_is_total(raw in "\\PC{0,200}") {
                let _ = parse_extraction(&raw, &features(), 4);
            }

            #[test]
            fn parsing_is_total_on_jsonish(raw in "[{}\\[\\]\":,0-9a-zA-Z \\-.%$]{0,120}") {
                let _ = parse_extraction(&raw, &features(), 4);
            }
        }
    }
}
