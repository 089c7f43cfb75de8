//! SHAP explanation data model.
//!
//! A [`ShapTable`] holds the attributions of every feature for one instance and
//! doubles as the on-disk instance file format. Generation works on a
//! [`TruncatedTable`] (the `n` features with the largest absolute SHAP value),
//! from which the [`GroundTruth`] ranks, signs and values are derived.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Number of features kept in the truncated table unless configured otherwise.
pub const DEFAULT_TRUNCATION: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub name: String,
    pub description: String,
    /// Training-set mean of the feature.
    pub average_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapRow {
    #[serde(flatten)]
    pub feature: FeatureMeta,
    /// Signed contribution to the class-1 score.
    pub shap_value: f64,
    /// The instance's own value for this feature.
    pub feature_value: f64,
}

impl ShapRow {
    pub fn name(&self) -> &str {
        &self.feature.name
    }
}

/// Direction of a feature's contribution relative to class 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sign {
    Negative,
    Positive,
}

impl Sign {
    /// Sign of a SHAP value; `None` for exactly zero (and NaN).
    pub fn of(value: f64) -> Option<Sign> {
        if value > 0.0 {
            Some(Sign::Positive)
        } else if value < 0.0 {
            Some(Sign::Negative)
        } else {
            None
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Sign::Negative => -1,
            Sign::Positive => 1,
        }
    }

    pub fn flipped(self) -> Sign {
        match self {
            Sign::Negative => Sign::Positive,
            Sign::Positive => Sign::Negative,
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+}", self.as_i8())
    }
}

impl Serialize for Sign {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.as_i8())
    }
}

impl<'de> Deserialize<'de> for Sign {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match i8::deserialize(d)? {
            1 => Ok(Sign::Positive),
            -1 => Ok(Sign::Negative),
            other => Err(serde::de::Error::custom(format!("sign must be 1 or -1, got {other}"))),
        }
    }
}

/// Attributions for every feature of one instance. Serializes as the instance file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapTable {
    pub dataset_id: String,
    pub instance_id: String,
    pub true_label: u8,
    pub class1_score: f64,
    pub base_score: f64,
    #[serde(rename = "features")]
    pub rows: Vec<ShapRow>,
}

impl ShapTable {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::Input(format!(
                "instance {}/{}: {msg}",
                self.dataset_id, self.instance_id
            )))
        };
        if self.rows.is_empty() {
            return bad("table has no features".into());
        }
        if self.true_label > 1 {
            return bad(format!("true_label must be 0 or 1, got {}", self.true_label));
        }
        for (what, score) in [("class1_score", self.class1_score), ("base_score", self.base_score)] {
            if !(0.0..=1.0).contains(&score) {
                return bad(format!("{what} {score} outside [0, 1]"));
            }
        }
        let mut seen = HashSet::new();
        for row in &self.rows {
            if row.name().trim().is_empty() {
                return bad("empty feature name".into());
            }
            if !seen.insert(row.name()) {
                return bad(format!("duplicate feature name `{}`", row.name()));
            }
            if !row.shap_value.is_finite() || !row.feature_value.is_finite() {
                return bad(format!("non-finite value for feature `{}`", row.name()));
            }
            if !row.feature.average_value.is_finite() {
                return bad(format!("non-finite average for feature `{}`", row.name()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<ShapTable> {
        let table: ShapTable =
            serde_json::from_str(text).map_err(|e| Error::Input(format!("malformed instance file: {e}")))?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<ShapTable> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::store(path, e))?;
        ShapTable::from_json(&text).map_err(|e| match e {
            Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Names of all N features, in dataset column order.
    pub fn feature_set(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.feature.name.clone()).collect()
    }
}

/// The `n` most important rows of a [`ShapTable`].
///
/// Tables produced by [`truncate`] are sorted by non-increasing |SHAP|. A random
/// SHAP permutation deliberately breaks that order while keeping rows in place,
/// which is why [`ground_truth`] ranks by magnitude instead of trusting position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedTable {
    pub dataset_id: String,
    pub instance_id: String,
    pub true_label: u8,
    pub class1_score: f64,
    pub base_score: f64,
    pub rows: Vec<ShapRow>,
}

impl TruncatedTable {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Hex SHA-256 over the canonical JSON encoding of the rows.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.rows).expect("rows serialize");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn row(&self, name: &str) -> Option<&ShapRow> {
        self.rows.iter().find(|r| r.name() == name)
    }
}

fn abs_order(rows: &[ShapRow]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    // sort_by is stable, so equal magnitudes keep column order
    idx.sort_by(|&a, &b| rows[b].shap_value.abs().total_cmp(&rows[a].shap_value.abs()));
    idx
}

/// Rows sorted by |SHAP| descending, ties kept in original order.
pub fn rank_by_abs(table: &ShapTable) -> Vec<ShapRow> {
    abs_order(&table.rows)
        .into_iter()
        .map(|i| table.rows[i].clone())
        .collect()
}

pub fn truncate(table: &ShapTable, n: usize) -> Result<TruncatedTable> {
    let total = table.rows.len();
    if n == 0 || n > total {
        return Err(Error::Config(format!(
            "truncation size {n} outside 1..={total} for {}/{}",
            table.dataset_id, table.instance_id
        )));
    }
    let mut rows = rank_by_abs(table);
    rows.truncate(n);
    Ok(TruncatedTable {
        dataset_id: table.dataset_id.clone(),
        instance_id: table.instance_id.clone(),
        true_label: table.true_label,
        class1_score: table.class1_score,
        base_score: table.base_score,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub feature: String,
    pub rank: usize,
    pub sign: Sign,
    pub value: f64,
    pub average_value: f64,
}

/// Expected rank, sign and value for each feature of a truncated table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub entries: Vec<TruthEntry>,
}

impl GroundTruth {
    pub fn get(&self, feature: &str) -> Option<&TruthEntry> {
        self.entries.iter().find(|e| e.feature == feature)
    }

    pub fn n(&self) -> usize {
        self.entries.len()
    }
}

/// Ground truth in row order. Ranks follow |SHAP| (stable), which equals the row
/// index for any table produced by [`truncate`].
pub fn ground_truth(table: &TruncatedTable) -> Result<GroundTruth> {
    let mut ranks = vec![0usize; table.rows.len()];
    for (rank, idx) in abs_order(&table.rows).into_iter().enumerate() {
        ranks[idx] = rank;
    }
    let entries = table
        .rows
        .iter()
        .zip(ranks)
        .map(|(row, rank)| {
            let sign = Sign::of(row.shap_value).ok_or_else(|| Error::DegenerateSign {
                feature: row.name().to_string(),
            })?;
            Ok(TruthEntry {
                feature: row.name().to_string(),
                rank,
                sign,
                value: row.feature_value,
                average_value: row.feature.average_value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundTruth { entries })
}

/// Feature values and averages: integral values without decimals, others with two.
pub fn format_feature_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

pub fn format_shap(v: f64) -> String {
    format!("{v:.3}")
}

fn one_line(s: &str) -> String {
    s.replace("\r\n", " ").replace(['\n', '\r'], " ")
}

/// Separator between the columns of a rendered table row.
pub const COLUMN_SEPARATOR: &str = " | ";

/// One line per row, in row order:
/// `name | shap | feature value | average | description`.
pub fn render_table_block(table: &TruncatedTable) -> String {
    table
        .rows
        .iter()
        .map(|r| {
            [
                one_line(r.name()),
                format_shap(r.shap_value),
                format_feature_number(r.feature_value),
                format_feature_number(r.feature.average_value),
                one_line(&r.feature.description),
            ]
            .join(COLUMN_SEPARATOR)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn row(name: &str, shap: f64, value: f64, avg: f64) -> ShapRow {
        ShapRow {
            feature: FeatureMeta {
                name: name.into(),
                description: format!("Description of {name}."),
                average_value: avg,
            },
            shap_value: shap,
            feature_value: value,
        }
    }

    pub(crate) fn table(shaps: &[f64]) -> ShapTable {
        ShapTable {
            dataset_id: "toy".into(),
            instance_id: "0".into(),
            true_label: 1,
            class1_score: 0.6,
            base_score: 0.5,
            rows: shaps
                .iter()
                .enumerate()
                .map(|(i, &s)| row(&format!("f{i}"), s, i as f64 + 0.5, 1.0))
                .collect(),
        }
    }

    fn shaps(rows: &[ShapRow]) -> Vec<f64> {
        rows.iter().map(|r| r.shap_value).collect()
    }

    #[test]
    fn rank_by_abs_orders_by_magnitude() {
        assert_eq!(shaps(&rank_by_abs(&table(&[-0.3, 0.5, 0.1]))), vec![0.5, -0.3, 0.1]);
    }

    #[test]
    fn rank_by_abs_is_stable_on_ties() {
        let t = table(&[0.2, -0.2]);
        let ranked = rank_by_abs(&t);
        assert_eq!(shaps(&ranked), vec![0.2, -0.2]);
        assert_eq!(ranked[0].name(), "f0");
    }

    #[test]
    fn rank_by_abs_single_row() {
        assert_eq!(shaps(&rank_by_abs(&table(&[-0.7]))), vec![-0.7]);
    }

    #[test]
    fn truncate_keeps_top_magnitudes() {
        let t = table(&[0.01, -0.4, 0.05, 0.3, -0.02, 0.2, 0.0, -0.25, 0.03, 0.1]);
        let tt = truncate(&t, 4).unwrap();
        assert_eq!(shaps(&tt.rows), vec![-0.4, 0.3, -0.25, 0.2]);
        assert_eq!(tt.instance_id, "0");

        let full = truncate(&t, 10).unwrap();
        assert_eq!(full.rows, rank_by_abs(&t));

        let one = truncate(&t, 1).unwrap();
        assert_eq!(shaps(&one.rows), vec![-0.4]);
    }

    #[test]
    fn truncate_rejects_out_of_range() {
        let t = table(&[0.1, 0.2]);
        assert!(matches!(truncate(&t, 0), Err(Error::Config(_))));
        assert!(matches!(truncate(&t, 3), Err(Error::Config(_))));
    }

    #[test]
    fn ground_truth_signs_and_ranks() {
        let tt = truncate(&table(&[0.5, -0.3, 0.2, -0.1]), 4).unwrap();
        let gt = ground_truth(&tt).unwrap();
        let signs: Vec<i8> = gt.entries.iter().map(|e| e.sign.as_i8()).collect();
        let ranks: Vec<usize> = gt.entries.iter().map(|e| e.rank).collect();
        assert_eq!(signs, vec![1, -1, 1, -1]);
        assert_eq!(ranks, vec![0, 1, 2, 3]);

        let gt = ground_truth(&truncate(&table(&[-0.9]), 1).unwrap()).unwrap();
        assert_eq!(gt.entries[0].sign, Sign::Negative);
        assert_eq!(gt.entries[0].rank, 0);
    }

    #[test]
    fn ground_truth_rejects_zero_shap() {
        let tt = truncate(&table(&[0.4, 0.0]), 2).unwrap();
        match ground_truth(&tt) {
            Err(Error::DegenerateSign { feature }) => assert_eq!(feature, "f1"),
            other => panic!("expected degenerate sign, got {other:?}"),
        }
    }

    #[test]
    fn render_is_one_line_per_row_and_deterministic() {
        let mut t = table(&[0.5, -0.3, 0.2, -0.1]);
        t.rows[2].feature.description = "two\nlines".into();
        t.rows[0].feature_value = 3.0;
        let tt = truncate(&t, 4).unwrap();
        let block = render_table_block(&tt);
        assert_eq!(block.lines().count(), 4);
        assert_eq!(block, render_table_block(&tt));
        assert!(block.contains("two lines"));
        assert_eq!(block.lines().next().unwrap(), "f0 | 0.500 | 3 | 1 | Description of f0.");
        assert_eq!(
            block.lines().nth(1).unwrap(),
            "f1 | -0.300 | 1.50 | 1 | Description of f1."
        );
    }

    #[test]
    fn instance_file_round_trip_and_validation() {
        let t = table(&[0.5, -0.3]);
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.contains("\"features\""));
        assert_eq!(ShapTable::from_json(&json).unwrap(), t);

        let mut dup = t.clone();
        dup.rows[1].feature.name = "f0".into();
        assert!(dup.validate().is_err());
        let mut empty = t.clone();
        empty.rows.clear();
        assert!(empty.validate().is_err());
        let mut label = t;
        label.true_label = 2;
        assert!(label.validate().is_err());
    }

    #[test]
    fn number_formatting() {
        assert_eq!(format_feature_number(57.232), "57.23");
        assert_eq!(format_feature_number(5.0), "5");
        assert_eq!(format_feature_number(-2.0), "-2");
        assert_eq!(format_shap(0.12345), "0.123");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn truncate_matches_brute_force(values in prop::collection::vec(-1.0f64..1.0, 1..12), n_seed in 0usize..100) {
                let t = table(&values);
                let n = 1 + n_seed % values.len();
                let tt = truncate(&t, n).unwrap();
                // brute force: the n-th largest magnitude bounds every kept row
                let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
                mags.sort_by(|a, b| b.total_cmp(a));
                let mut kept: Vec<f64> = tt.rows.iter().map(|r| r.shap_value.abs()).collect();
                kept.sort_by(|a, b| b.total_cmp(a));
                prop_assert_eq!(kept, mags[..n].to_vec());
                prop_assert!(tt.rows.windows(2).all(|w| w[0].shap_value.abs() >= w[1].shap_value.abs()));
            }

            #[test]
            fn ground_truth_ranks_are_identity(values in prop::collection::vec(prop_oneof![0.001f64..1.0, -1.0f64..-0.001], 1..10)) {
                let t = table(&values);
                let tt = truncate(&t, values.len()).unwrap();
                let gt = ground_truth(&tt).unwrap();
                let ranks: Vec<usize> = gt.entries.iter().map(|e| e.rank).collect();
                prop_assert_eq!(ranks, (0..values.len()).collect::<Vec<_>>());
            }
        }
    }
}
