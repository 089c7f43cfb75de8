//! Perplexity of extracted assumptions as stand-alone sentences.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::extraction::ExtractionRecord;
use crate::gateway::{Gateway, TokenLogprobTrace};

/// `exp(-(1/N) Σ logprob_i)` over the scored tokens.
pub fn perplexity(trace: &TokenLogprobTrace) -> Result<f64> {
    if trace.tokens.is_empty() {
        return Err(Error::Input("perplexity of an empty token trace".into()));
    }
    let n = trace.tokens.len() as f64;
    let sum: f64 = trace.tokens.iter().map(|t| t.logprob).sum();
    Ok((-sum / n).exp())
}

/// A named logprob scorer, e.g. `L` for a Llama deployment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogprobBackend {
    pub id: String,
    pub provider: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionScore {
    pub feature_name: String,
    pub assumption: String,
    /// backend id -> perplexity
    pub ppl: BTreeMap<String, f64>,
    /// backend id -> tokens reported without a conditional probability
    pub excluded_tokens: BTreeMap<String, usize>,
    /// backend id -> error text, for backends that could not score this assumption
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub errors: BTreeMap<String, String>,
}

fn recoverable(e: &Error) -> bool {
    e.is_provider() || matches!(e, Error::Input(_))
}

fn score_text(
    text: &str,
    backend: &LogprobBackend,
    gateway: &Gateway,
) -> Result<std::result::Result<(f64, usize), String>> {
    match gateway
        .score_logprobs(text, &backend.provider, &backend.model)
        .and_then(|trace| Ok((perplexity(&trace)?, trace.excluded)))
    {
        Ok(v) => Ok(Ok(v)),
        Err(e) if recoverable(&e) => {
            warn!(backend = %backend.id, error = %e, "assumption not scored");
            Ok(Err(e.to_string()))
        }
        Err(e) => Err(e),
    }
}

/// Scores every non-φ assumption of `record` against every backend.
pub fn score_assumptions(
    record: &ExtractionRecord,
    backends: &[LogprobBackend],
    gateway: &Gateway,
) -> Result<Vec<AssumptionScore>> {
    if backends.is_empty() {
        return Err(Error::Config("no logprob backend configured".into()));
    }
    let mut out = Vec::new();
    for entry in &record.entries {
        let Some(assumption) = entry.assumption.as_deref().filter(|a| !a.trim().is_empty()) else {
            continue;
        };
        let mut score = AssumptionScore {
            feature_name: entry.feature_name.clone(),
            assumption: assumption.to_string(),
            ppl: BTreeMap::new(),
            excluded_tokens: BTreeMap::new(),
            errors: BTreeMap::new(),
        };
        for b in backends {
            match score_text(assumption, b, gateway)? {
                Ok((ppl, excluded)) => {
                    score.ppl.insert(b.id.clone(), ppl);
                    score.excluded_tokens.insert(b.id.clone(), excluded);
                }
                Err(msg) => {
                    score.errors.insert(b.id.clone(), msg);
                }
            }
        }
        out.push(score);
    }
    Ok(out)
}

/// Mean PPL of one narrative's assumptions for `backend`; `None` when nothing was scored.
pub fn narrative_mean_ppl(scores: &[AssumptionScore], backend: &str) -> Option<f64> {
    let vals: Vec<f64> = scores.iter().filter_map(|s| s.ppl.get(backend).copied()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendMean {
    pub backend: String,
    pub mean: f64,
}

/// `manipulated − standard` for the same backend.
pub fn delta_ppl(standard: &BackendMean, manipulated: &BackendMean) -> Result<f64> {
    if standard.backend != manipulated.backend {
        return Err(Error::Input(format!(
            "cannot compare PPL of backend `{}` with backend `{}`",
            standard.backend, manipulated.backend
        )));
    }
    Ok(manipulated.mean - standard.mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionPair {
    pub feature: String,
    pub original: String,
    pub manipulated: String,
}

pub fn load_pairs(text: &str) -> Result<Vec<AssumptionPair>> {
    serde_json::from_str(text).map_err(|e| Error::Input(format!("assumption pair file: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub pair_id: usize,
    pub feature: String,
    pub backend: String,
    pub ppl_original: f64,
    pub ppl_manipulated: f64,
    pub delta: f64,
}

/// ΔPPL per (pair, backend), sorted by backend then ascending delta.
pub fn score_pairs(pairs: &[AssumptionPair], backends: &[LogprobBackend], gateway: &Gateway) -> Result<Vec<PairDelta>> {
    if backends.is_empty() {
        return Err(Error::Config("no logprob backend configured".into()));
    }
    let mut out = Vec::new();
    for b in backends {
        for (pair_id, p) in pairs.iter().enumerate() {
            let ppl_of = |text: &str| -> Result<f64> {
                let trace = gateway.score_logprobs(text, &b.provider, &b.model)?;
                perplexity(&trace)
            };
            let ppl_original = ppl_of(&p.original)?;
            let ppl_manipulated = ppl_of(&p.manipulated)?;
            out.push(PairDelta {
                pair_id,
                feature: p.feature.clone(),
                backend: b.id.clone(),
                ppl_original,
                ppl_manipulated,
                delta: ppl_manipulated - ppl_original,
            });
        }
    }
    out.sort_by(|a, b| {
        a.backend
            .cmp(&b.backend)
            .then(a.delta.total_cmp(&b.delta))
            .then(a.pair_id.cmp(&b.pair_id))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::FeatureExtraction;
    use crate::gateway::{MockBackend, MockConfig, TokenLogprob};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn trace(lps: &[f64]) -> TokenLogprobTrace {
        TokenLogprobTrace {
            tokens: lps
                .iter()
                .map(|&l| TokenLogprob {
                    token: "t".into(),
                    logprob: l,
                })
                .collect(),
            excluded: 0,
        }
    }

    fn product_form(lps: &[f64]) -> f64 {
        let p: f64 = lps.iter().map(|l| l.exp()).product();
        p.powf(-1.0 / lps.len() as f64)
    }

    #[test]
    fn spec_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((perplexity(&trace(&[-ln2; 4])).unwrap() - 2.0).abs() < 1e-12);
        assert!((perplexity(&trace(&[-(10f64).ln()])).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(perplexity(&trace(&[0.0, 0.0])).unwrap(), 1.0);
        assert!(matches!(perplexity(&trace(&[])), Err(Error::Input(_))));
    }

    #[test]
    fn uniform_identities() {
        for m in [2.0f64, 10.0, 100.0] {
            for k in [1, 3, 17] {
                let got = perplexity(&trace(&vec![-m.ln(); k])).unwrap();
                assert!((got - m).abs() < 1e-9, "m={m} k={k} got {got}");
            }
        }
    }

    #[test]
    fn delta_examples() {
        let m = |b: &str, v: f64| BackendMean {
            backend: b.into(),
            mean: v,
        };
        assert_eq!(delta_ppl(&m("L", 95.0), &m("L", 88.0)).unwrap(), -7.0);
        assert_eq!(delta_ppl(&m("L", 74.0), &m("L", 87.0)).unwrap(), 13.0);
        assert_eq!(delta_ppl(&m("L", 3.5), &m("L", 3.5)).unwrap(), 0.0);
        assert!(delta_ppl(&m("L", 1.0), &m("M", 1.0)).is_err());
    }

    fn record(assumptions: &[Option<&str>]) -> ExtractionRecord {
        ExtractionRecord {
            entries: assumptions
                .iter()
                .enumerate()
                .map(|(i, a)| FeatureExtraction {
                    feature_name: format!("f{i}"),
                    rank: Some(i as i64),
                    sign: None,
                    value: None,
                    assumption: a.map(str::to_string),
                })
                .collect(),
            anomalies: vec![],
            failure: None,
        }
    }

    fn gateway() -> Gateway {
        let half = MockConfig {
            logprob: Some(-std::f64::consts::LN_2),
            ..Default::default()
        };
        Gateway::new()
            .with_backend("a", Arc::new(MockBackend::new(half)))
            .with_backend("b", Arc::new(MockBackend::default()))
    }

    #[test]
    fn scoring_skips_phi_and_covers_backends() {
        let gw = gateway();
        let backends = vec![
            LogprobBackend {
                id: "L".into(),
                provider: "a".into(),
                model: "m".into(),
            },
            LogprobBackend {
                id: "M".into(),
                provider: "b".into(),
                model: "m".into(),
            },
        ];
        let rec = record(&[Some("High x raises y."), None, Some("Low z lowers y."), Some("Short.")]);
        let scores = score_assumptions(&rec, &backends, &gw).unwrap();
        assert_eq!(scores.len(), 3);
        for s in &scores {
            assert!((s.ppl["L"] - 2.0).abs() < 1e-12);
            assert!(s.ppl["M"] >= 1.0);
            assert_eq!(s.ppl.len(), 2);
        }
        assert!((narrative_mean_ppl(&scores, "L").unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(narrative_mean_ppl(&scores, "X"), None);
        assert!(score_assumptions(&rec, &[], &gw).is_err());
    }

    struct NoLogprobs;

    impl crate::gateway::Backend for NoLogprobs {
        fn chat(&self, _: &str, _: &str, _: f64) -> Result<String> {
            unimplemented!()
        }
        fn score_logprobs(&self, _: &str, _: &str) -> Result<TokenLogprobTrace> {
            Err(Error::Capability {
                provider: "c".into(),
                detail: "no logprobs".into(),
            })
        }
        fn embed(&self, _: &str, _: &str) -> Result<Vec<f64>> {
            unimplemented!()
        }
    }

    #[test]
    fn capability_error_is_recorded_per_assumption() {
        let gw = gateway().with_backend("c", Arc::new(NoLogprobs));
        let backends = vec![
            LogprobBackend {
                id: "L".into(),
                provider: "a".into(),
                model: "m".into(),
            },
            LogprobBackend {
                id: "C".into(),
                provider: "c".into(),
                model: "m".into(),
            },
        ];
        let scores = score_assumptions(&record(&[Some("x."), Some("y.")]), &backends, &gw).unwrap();
        assert_eq!(scores.len(), 2);
        for s in &scores {
            assert!(s.ppl.contains_key("L"));
            assert!(s.errors["C"].contains("no logprobs"));
        }
        let missing = vec![LogprobBackend {
            id: "X".into(),
            provider: "missing".into(),
            model: "m".into(),
        }];
        assert!(matches!(
            score_assumptions(&record(&[Some("x.")]), &missing, &gw),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pairs_sorted_by_delta() {
        let gw = gateway();
        let pairs = load_pairs(
            r#"[{"feature":"a","original":"one two","manipulated":"one two three four five"},
                {"feature":"b","original":"alpha beta gamma","manipulated":"alpha"}]"#,
        )
        .unwrap();
        let backends = vec![LogprobBackend {
            id: "M".into(),
            provider: "b".into(),
            model: "m".into(),
        }];
        let out = score_pairs(&pairs, &backends, &gw).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out[0].delta <= out[1].delta);
        for d in &out {
            assert!((d.delta - (d.ppl_manipulated - d.ppl_original)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn log_form_matches_product_form(lps in prop::collection::vec(-5.0f64..0.0, 1..12)) {
            let a = perplexity(&trace(&lps)).unwrap();
            prop_assert!((a - product_form(&lps)).abs() < 1e-9 * a.max(1.0));
        }

        #[test]
        fn at_least_one_for_true_probabilities(lps in prop::collection::vec(-20.0f64..=0.0, 1..20)) {
            prop_assert!(perplexity(&trace(&lps)).unwrap() >= 1.0);
        }

        #[test]
        fn lowering_a_token_raises_ppl(
            lps in prop::collection::vec(-8.0f64..0.0, 1..12),
            idx in 0usize..12,
            drop in 0.01f64..3.0,
        ) {
            let i = idx % lps.len();
            let mut lower = lps.clone();
            lower[i] -= drop;
            prop_assert!(perplexity(&trace(&lower)).unwrap() > perplexity(&trace(&lps)).unwrap());
        }
    }
}
