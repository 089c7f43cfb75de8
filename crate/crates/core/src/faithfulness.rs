//! Rank, sign and value agreement, the rank/sign faithfulness classifier,
//! confusion tallies and the sign-swap analysis for manipulated narratives.
//!
//! Each agreement is `Σ δ(x_j, x*_j) / (n − #φ)` over the extracted entries:
//! φ entries drop out of numerator and denominator, and entries for features
//! outside the model's feature set are omitted entirely. An entry for a known
//! feature that is absent from the ground truth can never agree.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::explanation::{GroundTruth, Sign, TruncatedTable};
use crate::extraction::{AnomalyKind, ExtractionRecord, FeatureExtraction};

/// When an extracted value counts as matching the table value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValueTolerance {
    pub absolute: f64,
    pub relative: f64,
    /// Also accept the table value rounded to the extracted value's precision.
    pub display_rounding: bool,
}

impl Default for ValueTolerance {
    fn default() -> Self {
        ValueTolerance {
            absolute: 0.005,
            relative: 0.01,
            display_rounding: true,
        }
    }
}

/// Decimal places in the shortest representation of `v` (capped at 12).
fn displayed_decimals(v: f64) -> i32 {
    let s = format!("{v}");
    if s.contains('e') {
        return 12;
    }
    s.split_once('.').map_or(0, |(_, frac)| frac.len().min(12) as i32)
}

impl ValueTolerance {
    pub fn matches(&self, extracted: f64, truth: f64) -> bool {
        if (extracted - truth).abs() <= self.absolute.max(self.relative * truth.abs()) {
            return true;
        }
        if self.display_rounding {
            let scale = 10f64.powi(displayed_decimals(extracted));
            let rounded = (truth * scale).round() / scale;
            return (rounded - extracted).abs() <= 1e-9 * extracted.abs().max(1.0);
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub hits: usize,
    pub counted: usize,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.counted += 1;
        self.hits += usize::from(hit);
    }

    /// `None` when nothing was counted.
    pub fn ratio(&self) -> Option<f64> {
        (self.counted > 0).then(|| self.hits as f64 / self.counted as f64)
    }

    pub fn perfect(&self) -> bool {
        self.counted > 0 && self.hits == self.counted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementScores {
    pub ra: Option<f64>,
    pub sa: Option<f64>,
    pub va: Option<f64>,
    pub rank: Tally,
    pub sign: Tally,
    pub value: Tally,
    pub counted_values: usize,
    pub omitted_unknown: usize,
    /// Kendall tau-a between extracted and true ranks; supplementary only.
    pub kendall_tau: Option<f64>,
}

impl AgreementScores {
    /// True when RA or SA has no counted entries.
    pub fn undefined_rank_or_sign(&self) -> bool {
        self.ra.is_none() || self.sa.is_none()
    }
}

fn unknown_features(record: &ExtractionRecord) -> BTreeSet<&str> {
    record
        .anomalies
        .iter()
        .filter(|a| a.kind == AnomalyKind::UnknownFeature)
        .map(|a| a.feature_name.as_str())
        .collect()
}

fn scored_entries(record: &ExtractionRecord) -> (Vec<&FeatureExtraction>, usize) {
    let unknown = unknown_features(record);
    let (known, omitted): (Vec<_>, Vec<_>) = record
        .entries
        .iter()
        .partition(|e| !unknown.contains(e.feature_name.as_str()));
    (known, omitted.len())
}

fn kendall_tau(pairs: &[(i64, i64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let mut score = 0i64;
    let mut total = 0i64;
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            let a = (pairs[i].0 - pairs[j].0).signum();
            let b = (pairs[i].1 - pairs[j].1).signum();
            score += a * b;
            total += 1;
        }
    }
    Some(score as f64 / total as f64)
}

/// RA, SA and VA of an extraction against a ground truth. The record must have
/// been validated, since unknown features are recognized by their anomaly.
pub fn agreement(record: &ExtractionRecord, gt: &GroundTruth, tolerance: &ValueTolerance) -> AgreementScores {
    let (known, omitted_unknown) = scored_entries(record);
    let mut rank = Tally::default();
    let mut sign = Tally::default();
    let mut value = Tally::default();
    let mut rank_pairs = Vec::new();
    for e in known {
        let truth = gt.get(&e.feature_name);
        if let Some(r) = e.rank {
            let hit = truth.is_some_and(|t| t.rank as i64 == r);
            rank.add(hit);
            if let Some(t) = truth {
                rank_pairs.push((r, t.rank as i64));
            }
        }
        if let Some(s) = e.sign {
            sign.add(truth.is_some_and(|t| t.sign == s));
        }
        if let Some(v) = e.value {
            value.add(truth.is_some_and(|t| tolerance.matches(v, t.value)));
        }
    }
    AgreementScores {
        ra: rank.ratio(),
        sa: sign.ratio(),
        va: value.ratio(),
        counted_values: value.counted,
        rank,
        sign,
        value,
        omitted_unknown,
        kendall_tau: kendall_tau(&rank_pairs),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Rank,
    Sign,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierVerdict {
    pub faithful: bool,
    pub failing: BTreeSet<Quantity>,
}

/// Faithful iff every extracted rank and sign agrees with the ground truth.
/// A quantity with nothing to check (including a failed extraction) fails.
pub fn classify(record: &ExtractionRecord, gt: &GroundTruth) -> ClassifierVerdict {
    let scores = agreement(record, gt, &ValueTolerance::default());
    let mut failing = BTreeSet::new();
    if !scores.rank.perfect() {
        failing.insert(Quantity::Rank);
    }
    if !scores.sign.perfect() {
        failing.insert(Quantity::Sign);
    }
    ClassifierVerdict {
        faithful: failing.is_empty(),
        failing,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Faithful,
    Faulty,
}

/// Confusion counts with faithful as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tp: usize,
}

impl Confusion {
    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn positives(&self) -> usize {
        self.fn_ + self.tp
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tp += other.tp;
    }

    /// `[TN, FP, FN, TP]` as `count/total` cells.
    pub fn cells(&self) -> [String; 4] {
        let (neg, pos) = (self.negatives(), self.positives());
        [
            format!("{}/{neg}", self.tn),
            format!("{}/{neg}", self.fp),
            format!("{}/{pos}", self.fn_),
            format!("{}/{pos}", self.tp),
        ]
    }
}

pub fn confusion_tally<'a>(items: impl IntoIterator<Item = (&'a ClassifierVerdict, Label)>) -> Confusion {
    let mut c = Confusion::default();
    for (verdict, label) in items {
        match (label, verdict.faithful) {
            (Label::Faulty, false) => c.tn += 1,
            (Label::Faulty, true) => c.fp += 1,
            (Label::Faithful, false) => c.fn_ += 1,
            (Label::Faithful, true) => c.tp += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapDirection {
    PosToNeg,
    NegToPos,
}

impl fmt::Display for SwapDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SwapDirection::PosToNeg => "pos_to_neg",
            SwapDirection::NegToPos => "neg_to_pos",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSide {
    BelowAverage,
    AboveAverage,
}

impl fmt::Display for ValueSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueSide::BelowAverage => "below_average",
            ValueSide::AboveAverage => "above_average",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapCount {
    pub feature_name: String,
    pub direction: SwapDirection,
    pub value_side: ValueSide,
    pub count: usize,
}

/// One manipulated narrative's extraction together with the table it was generated from.
#[derive(Debug, Clone, Copy)]
pub struct SwapInput<'a> {
    pub record: &'a ExtractionRecord,
    pub manipulated: &'a TruncatedTable,
}

/// Counts extracted signs that disagree with the manipulated table, bucketed by
/// feature, swap direction and whether the feature value lies below its average.
/// Features occurring in fewer than `min_occurrences` narratives of the pool are dropped.
pub fn count_sign_swaps(pool: &[SwapInput<'_>], min_occurrences: usize) -> Vec<SwapCount> {
    let mut occurrences: BTreeMap<&str, usize> = BTreeMap::new();
    let mut buckets: BTreeMap<(&str, SwapDirection, ValueSide), usize> = BTreeMap::new();
    for item in pool {
        let unknown = unknown_features(item.record);
        for e in &item.record.entries {
            if unknown.contains(e.feature_name.as_str()) {
                continue;
            }
            let (Some(extracted), Some(row)) = (e.sign, item.manipulated.row(&e.feature_name)) else {
                continue;
            };
            let Some(given) = Sign::of(row.shap_value) else {
                continue;
            };
            *occurrences.entry(row.name()).or_default() += 1;
            if extracted == given {
                continue;
            }
            let direction = match given {
                Sign::Positive => SwapDirection::PosToNeg,
                Sign::Negative => SwapDirection::NegToPos,
            };
            let side = if row.feature_value < row.feature.average_value {
                ValueSide::BelowAverage
            } else {
                ValueSide::AboveAverage
            };
            *buckets.entry((row.name(), direction, side)).or_default() += 1;
        }
    }
    buckets
        .into_iter()
        .filter(|((feature, _, _), _)| occurrences[feature] >= min_occurrences)
        .map(|((feature, direction, value_side), count)| SwapCount {
            feature_name: feature.to_string(),
            direction,
            value_side,
            count,
        })
        .collect()
}
