//! Embedding similarity between generated and reference narratives.

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResult {
    pub generated_id: String,
    pub reference_id: String,
    pub cos_theta: f64,
    /// `1 − cos_theta`
    pub distance: f64,
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Input("cosine of a zero or non-finite vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_distance(
    generated_id: &str,
    generated: &[f64],
    reference_id: &str,
    reference: &[f64],
) -> Result<SimilarityResult> {
    let cos_theta = cosine(generated, reference)?;
    Ok(SimilarityResult {
        generated_id: generated_id.to_string(),
        reference_id: reference_id.to_string(),
        cos_theta,
        distance: 1.0 - cos_theta,
    })
}

/// Distance between a candidate and a reference narrative; lower is closer.
/// External scorers plug in here.
pub trait PairwiseScorer {
    fn distance(&self, candidate: &Embedded, reference: &Embedded) -> Result<f64>;
}

pub struct CosineScorer;

impl PairwiseScorer for CosineScorer {
    fn distance(&self, candidate: &Embedded, reference: &Embedded) -> Result<f64> {
        Ok(1.0 - cosine(&candidate.vector, &reference.vector)?)
    }
}

/// A narrative with its embedding. `key` pairs references with candidates
/// (typically `<dataset>/<instance>`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedded {
    pub id: String,
    pub key: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearestMatch {
    pub reference_id: String,
    pub nearest_id: String,
    pub distance: f64,
    pub paired_id: String,
    pub paired_distance: f64,
    pub is_self_match: bool,
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub reference_id: String,
    pub candidate_id: String,
    pub distance: f64,
    pub is_paired: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub matches: Vec<NearestMatch>,
    pub self_match_count: usize,
    pub total: usize,
    pub scatter: Vec<ScatterRow>,
}

pub fn nearest_match_rate(
    references: &[Embedded],
    candidates: &[Embedded],
    scorer: &dyn PairwiseScorer,
) -> Result<MatchReport> {
    let mut matches = Vec::with_capacity(references.len());
    let mut scatter = Vec::new();
    for r in references {
        let paired: Vec<usize> = candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.key == r.key)
            .map(|(i, _)| i)
            .collect();
        let paired = match paired.as_slice() {
            [one] => *one,
            [] => return Err(Error::Input(format!("reference `{}` has no paired candidate", r.id))),
            _ => {
                return Err(Error::Input(format!(
                    "reference `{}` has {} paired candidates",
                    r.id,
                    paired.len()
                )))
            }
        };
        let mut best: Option<(usize, f64)> = None;
        let mut tie = false;
        let mut paired_distance = f64::NAN;
        for (i, c) in candidates.iter().enumerate() {
            let d = scorer.distance(c, r)?;
            scatter.push(ScatterRow {
                reference_id: r.id.clone(),
                candidate_id: c.id.clone(),
                distance: d,
                is_paired: i == paired,
            });
            if i == paired {
                paired_distance = d;
            }
            match best {
                Some((_, bd)) if d == bd => tie = true,
                Some((_, bd)) if d > bd => {}
                _ => {
                    best = Some((i, d));
                    tie = false;
                }
            }
        }
        let (nearest, distance) = best.expect("paired candidate exists");
        if tie {
            info!(reference = %r.id, "nearest match is tied; lowest index chosen");
        }
        matches.push(NearestMatch {
            reference_id: r.id.clone(),
            nearest_id: candidates[nearest].id.clone(),
            distance,
            paired_id: candidates[paired].id.clone(),
            paired_distance,
            is_self_match: nearest == paired,
            tie,
        });
    }
    let self_match_count = matches.iter().filter(|m| m.is_self_match).count();
    Ok(MatchReport {
        total: matches.len(),
        self_match_count,
        matches,
        scatter,
    })
}

/// Mean cos(θ) of each generated narrative against the reference sharing its key.
pub fn mean_reference_cosine(generated: &[Embedded], references: &[Embedded]) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Input("empty narrative pool".into()));
    }
    let mut sum = 0.0;
    for g in generated {
        let r = references
            .iter()
            .find(|r| r.key == g.key)
            .ok_or_else(|| Error::Input(format!("no reference narrative for `{}`", g.key)))?;
        sum += cosine(&g.vector, &r.vector)?;
    }
    Ok(sum / generated.len() as f64)
}
