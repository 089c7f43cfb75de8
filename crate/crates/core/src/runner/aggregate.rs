//! Per-repeat means, then min|max across repeats.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::faithfulness::{confusion_tally, count_sign_swaps, Confusion, Label, SwapCount, SwapInput};
use crate::pipeline::Condition;
use crate::prompt::PromptStyle;
use crate::similarity::{nearest_match_rate, CosineScorer, Embedded, ScatterRow};

use super::store::{
    self, CellId, MetricsRecord, RunStore, StoredEmbedding, StoredExtraction, StoredNarrative, HUMAN_LABEL,
};
use super::{matrix_cells, ExperimentConfig};

/// Slice label for the pooled (all-dataset) rows.
pub const ALL_DATASETS: &str = "all";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn of(values: &[f64]) -> Option<MinMax> {
        let first = *values.first()?;
        Some(values.iter().fold(MinMax { min: first, max: first }, |acc, &v| MinMax {
            min: acc.min.min(v),
            max: acc.max.max(v),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaColumns {
    pub ra: Option<MinMax>,
    pub sa: Option<MinMax>,
    pub va: Option<MinMax>,
    pub cos: Option<MinMax>,
    pub ppl: BTreeMap<String, MinMax>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    /// `all` or a dataset id.
    pub slice: String,
    pub model: String,
    pub style: Option<PromptStyle>,
    pub condition: Condition,
    pub repeats: usize,
    /// Narratives per repeat (the largest repeat when repeats differ).
    pub narratives: usize,
    /// Against the original tables.
    pub ra: Option<MinMax>,
    pub sa: Option<MinMax>,
    pub va: Option<MinMax>,
    /// Against the tables given to the generator.
    pub ra_given: Option<MinMax>,
    pub sa_given: Option<MinMax>,
    pub va_given: Option<MinMax>,
    pub cos: Option<MinMax>,
    pub ppl: BTreeMap<String, MinMax>,
    pub extraction_failures: usize,
    pub repair_attempts: usize,
    /// This row minus the standard row of the same slice, model and style, per repeat.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<DeltaColumns>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub model: String,
    pub style: PromptStyle,
    pub repeat: usize,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapRow {
    pub model: String,
    #[serde(flatten)]
    pub count: SwapCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub model: String,
    pub style: PromptStyle,
    pub repeat: usize,
    pub self_match_count: usize,
    pub total: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterOut {
    pub model: String,
    pub style: PromptStyle,
    pub repeat: usize,
    #[serde(flatten)]
    pub row: ScatterRow,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub rows: Vec<AggregateRow>,
    pub confusion: Vec<ConfusionRow>,
    pub swaps: Vec<SwapRow>,
    pub matches: Vec<MatchRow>,
    pub scatter: Vec<ScatterOut>,
    /// Expected cells without metrics; empty unless partial aggregation was allowed.
    pub gaps: Vec<String>,
}

type Metric = fn(&MetricsRecord) -> Option<f64>;

/// A failed extraction agrees on nothing; an undefined tally is left out.
fn failed_or(m: &MetricsRecord, v: Option<f64>) -> Option<f64> {
    if m.extraction_failed {
        Some(0.0)
    } else {
        v
    }
}

const RA: Metric = |m| failed_or(m, m.agreement.ra);
const SA: Metric = |m| failed_or(m, m.agreement.sa);
const VA: Metric = |m| failed_or(m, m.agreement.va);
const RA_GIVEN: Metric = |m| failed_or(m, m.agreement_given.as_ref()?.ra);
const SA_GIVEN: Metric = |m| failed_or(m, m.agreement_given.as_ref()?.sa);
const VA_GIVEN: Metric = |m| failed_or(m, m.agreement_given.as_ref()?.va);
const COS: Metric = |m| m.cos;

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Records of one row, grouped by repeat.
struct Group<'a> {
    by_repeat: BTreeMap<usize, Vec<&'a MetricsRecord>>,
}

impl<'a> Group<'a> {
    fn repeat_means(&self, f: impl Fn(&MetricsRecord) -> Option<f64>) -> BTreeMap<usize, f64> {
        self.by_repeat
            .iter()
            .filter_map(|(&r, recs)| Some((r, mean(recs.iter().filter_map(|m| f(m)))?)))
            .collect()
    }

    fn min_max(&self, f: impl Fn(&MetricsRecord) -> Option<f64>) -> Option<MinMax> {
        MinMax::of(&self.repeat_means(f).into_values().collect::<Vec<_>>())
    }

    fn delta(&self, base: &Group<'_>, f: impl Fn(&MetricsRecord) -> Option<f64>) -> Option<MinMax> {
        let ours = self.repeat_means(&f);
        let theirs = base.repeat_means(&f);
        let diffs: Vec<f64> = ours.iter().filter_map(|(r, v)| Some(v - theirs.get(r)?)).collect();
        MinMax::of(&diffs)
    }

    fn ppl_backends(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .by_repeat
            .values()
            .flatten()
            .flat_map(|m| m.ppl.keys().cloned())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
struct RowKey {
    slice: String,
    model: String,
    style: Option<PromptStyle>,
    condition: Condition,
}

fn build_row<'a>(key: &RowKey, group: &Group<'a>, standard: Option<&Group<'a>>) -> AggregateRow {
    let all = || group.by_repeat.values().flatten();
    let ppl = group
        .ppl_backends()
        .into_iter()
        .filter_map(|b| {
            let mm = group.min_max(|m| m.ppl.get(&b).copied())?;
            Some((b, mm))
        })
        .collect();
    let delta = standard
        .filter(|_| key.condition != Condition::Standard)
        .map(|base| DeltaColumns {
            ra: group.delta(base, RA),
            sa: group.delta(base, SA),
            va: group.delta(base, VA),
            cos: group.delta(base, COS),
            ppl: group
                .ppl_backends()
                .into_iter()
                .filter_map(|b| {
                    let mm = group.delta(base, |m| m.ppl.get(&b).copied())?;
                    Some((b, mm))
                })
                .collect(),
        });
    AggregateRow {
        slice: key.slice.clone(),
        model: key.model.clone(),
        style: key.style,
        condition: key.condition,
        repeats: group.by_repeat.len(),
        narratives: group.by_repeat.values().map(Vec::len).max().unwrap_or(0),
        ra: group.min_max(RA),
        sa: group.min_max(SA),
        va: group.min_max(VA),
        ra_given: group.min_max(RA_GIVEN),
        sa_given: group.min_max(SA_GIVEN),
        va_given: group.min_max(VA_GIVEN),
        cos: group.min_max(COS),
        ppl,
        extraction_failures: all().filter(|m| m.extraction_failed).count(),
        repair_attempts: all().map(|m| m.repair_attempts).sum(),
        delta,
    }
}

/// Rows in report order: slice (pooled first), model, style, condition.
fn aggregate_rows(config: &ExperimentConfig, metrics: &[MetricsRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<RowKey, Group<'_>> = BTreeMap::new();
    for m in metrics {
        for slice in [ALL_DATASETS.to_string(), m.cell.dataset.clone()] {
            let key = RowKey {
                slice,
                model: m.cell.model.clone(),
                style: m.cell.style,
                condition: m.cell.condition,
            };
            groups
                .entry(key)
                .or_insert_with(|| Group {
                    by_repeat: BTreeMap::new(),
                })
                .by_repeat
                .entry(m.cell.repeat)
                .or_default()
                .push(m);
        }
    }

    let slices: Vec<&str> = std::iter::once(ALL_DATASETS)
        .chain(config.datasets.iter().map(String::as_str))
        .collect();
    let mut models: Vec<&str> = config.models.iter().map(|m| m.label.as_str()).collect();
    models.push(HUMAN_LABEL);
    let rank = |xs: &[&str], x: &str| xs.iter().position(|y| *y == x).unwrap_or(usize::MAX);
    let style_rank = |s: Option<PromptStyle>| {
        s.and_then(|s| config.styles.iter().position(|x| *x == s))
            .unwrap_or(usize::MAX)
    };
    let cond_rank = |c: Condition| config.conditions.iter().position(|x| *x == c).unwrap_or(usize::MAX);

    let mut keys: Vec<&RowKey> = groups.keys().collect();
    keys.sort_by_key(|k| {
        (
            rank(&slices, &k.slice),
            rank(&models, &k.model),
            style_rank(k.style),
            cond_rank(k.condition),
        )
    });
    keys.into_iter()
        .map(|k| {
            let standard_key = RowKey {
                condition: Condition::Standard,
                ..k.clone()
            };
            build_row(k, &groups[k], groups.get(&standard_key))
        })
        .collect()
}

fn confusion_rows(config: &ExperimentConfig, metrics: &[MetricsRecord]) -> Vec<ConfusionRow> {
    if !config.conditions.contains(&Condition::Permuted) {
        return Vec::new();
    }
    let mut out = Vec::new();
    for m in &config.models {
        for &style in &config.styles {
            for repeat in 0..config.repeats {
                let faulty = metrics.iter().filter(|r| {
                    r.cell.model == m.label
                        && r.cell.style == Some(style)
                        && r.cell.condition == Condition::Permuted
                        && r.cell.repeat == repeat
                });
                let faithful = metrics
                    .iter()
                    .filter(|r| r.cell.model == HUMAN_LABEL && r.cell.repeat == repeat);
                let items = faulty
                    .map(|r| (&r.verdict, Label::Faulty))
                    .chain(faithful.map(|r| (&r.verdict, Label::Faithful)));
                out.push(ConfusionRow {
                    model: m.label.clone(),
                    style,
                    repeat,
                    confusion: confusion_tally(items),
                });
            }
        }
    }
    out
}

fn swap_rows(store: &RunStore, config: &ExperimentConfig, metrics: &[MetricsRecord]) -> Result<Vec<SwapRow>> {
    let mut out = Vec::new();
    for m in &config.models {
        let cells: Vec<&CellId> = metrics
            .iter()
            .map(|r| &r.cell)
            .filter(|c| c.model == m.label && c.condition == Condition::Manipulated)
            .collect();
        let mut loaded = Vec::with_capacity(cells.len());
        for c in cells {
            let ext: StoredExtraction = store.read_json(store::EXTRACTIONS, &c.rel_path())?;
            let nar: StoredNarrative = store.read_json(store::NARRATIVES, &c.rel_path())?;
            loaded.push((ext.extraction, nar.table));
        }
        let pool: Vec<SwapInput<'_>> = loaded
            .iter()
            .map(|(record, table)| SwapInput {
                record,
                manipulated: table,
            })
            .collect();
        out.extend(
            count_sign_swaps(&pool, config.swap_min_occurrences)
                .into_iter()
                .map(|count| SwapRow {
                    model: m.label.clone(),
                    count,
                }),
        );
    }
    Ok(out)
}

fn match_rows(store: &RunStore, config: &ExperimentConfig) -> Result<(Vec<MatchRow>, Vec<ScatterOut>)> {
    let embeddings: Vec<StoredEmbedding> = store.read_all(store::EMBEDDINGS)?;
    let as_embedded = |e: &StoredEmbedding| Embedded {
        id: e.id.clone(),
        key: e.key.clone(),
        vector: e.values.clone(),
    };
    let mut references: Vec<Embedded> = embeddings
        .iter()
        .filter(|e| e.cell.is_none())
        .map(as_embedded)
        .collect();
    references.sort_by(|a, b| a.id.cmp(&b.id));
    if references.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut groups: BTreeMap<(usize, usize, usize), Vec<Embedded>> = BTreeMap::new();
    let model_rank: HashMap<&str, usize> = config
        .models
        .iter()
        .enumerate()
        .map(|(i, m)| (m.label.as_str(), i))
        .collect();
    for e in &embeddings {
        let Some(cell) = &e.cell else { continue };
        if cell.condition != Condition::Standard {
            continue;
        }
        let (Some(&mi), Some(si)) = (
            model_rank.get(cell.model.as_str()),
            cell.style.and_then(|s| config.styles.iter().position(|x| *x == s)),
        ) else {
            continue;
        };
        groups.entry((mi, si, cell.repeat)).or_default().push(as_embedded(e));
    }
    let mut matches = Vec::new();
    let mut scatter = Vec::new();
    for ((mi, si, repeat), mut candidates) in groups {
        candidates.sort_by(|a, b| a.id.cmp(&b.id));
        let (model, style) = (config.models[mi].label.clone(), config.styles[si]);
        match nearest_match_rate(&references, &candidates, &CosineScorer) {
            Ok(report) => {
                matches.push(MatchRow {
                    model: model.clone(),
                    style,
                    repeat,
                    self_match_count: report.self_match_count,
                    total: report.total,
                    ties: report.matches.iter().filter(|m| m.tie).count(),
                });
                scatter.extend(report.scatter.into_iter().map(|row| ScatterOut {
                    model: model.clone(),
                    style,
                    repeat,
                    row,
                }));
            }
            Err(e) => warn!(%model, %style, repeat, error = %e, "nearest-match experiment skipped"),
        }
    }
    Ok((matches, scatter))
}

/// Aggregates a run store. Refuses incomplete stores unless `allow_partial`
/// (which defaults to the run configuration's setting).
pub fn aggregate(store: &RunStore, allow_partial: Option<bool>) -> Result<Aggregates> {
    let snapshot = store.snapshot()?;
    let config = &snapshot.config;
    let allow_partial = allow_partial.unwrap_or(config.allow_partial);

    let metrics: Vec<MetricsRecord> = store.read_all(store::METRICS)?;
    let present: std::collections::HashSet<&CellId> = metrics.iter().map(|m| &m.cell).collect();
    let gaps: Vec<String> = matrix_cells(config, &snapshot)
        .into_iter()
        .filter(|(c, _)| !present.contains(c))
        .map(|(c, _)| c.label())
        .collect();
    if !gaps.is_empty() && !allow_partial {
        return Err(Error::IncompleteSlice { gaps });
    }

    let (matches, scatter) = match_rows(store, config)?;
    Ok(Aggregates {
        rows: aggregate_rows(config, &metrics),
        confusion: confusion_rows(config, &metrics),
        swaps: swap_rows(store, config, &metrics)?,
        matches,
        scatter,
        gaps,
    })
}
