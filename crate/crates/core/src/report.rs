//! Markdown, CSV and JSON renderings of aggregated runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::cache::write_atomic;
use crate::pipeline::Condition;
use crate::prompt::PromptStyle;
use crate::runner::aggregate::{AggregateRow, Aggregates, MinMax, ALL_DATASETS};
use crate::runner::{ExperimentConfig, HUMAN_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Md,
    Csv,
    Json,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Md, Format::Csv, Format::Json];
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "md" | "markdown" => Ok(Format::Md),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

pub const PPL_CAVEAT: &str = "PPL is indicative only: it is not an exclusive measure of assumption quality.";
const MISSING: &str = "n/a";

/// Fixed-point formatting without a negative zero.
pub fn fixed(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.chars().all(|c| c == '0' || c == '.') => rest.to_string(),
        _ => s,
    }
}

/// `min|max` at the given precision.
pub fn minmax_cell(mm: Option<MinMax>, decimals: usize) -> String {
    match mm {
        Some(mm) => format!("{}|{}", fixed(mm.min, decimals), fixed(mm.max, decimals)),
        None => MISSING.to_string(),
    }
}

fn md_escape(cell: &str) -> String {
    cell.replace('|', "\\|")
}

fn md_table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let line = |cells: &[String]| {
        let cells: Vec<String> = cells.iter().map(|c| md_escape(c)).collect();
        format!("| {} |\n", cells.join(" | "))
    };
    out.push_str(&line(header));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in rows {
        out.push_str(&line(r));
    }
}

fn style_name(s: Option<PromptStyle>) -> &'static str {
    s.map_or("-", PromptStyle::as_str)
}

fn rows_for<'a>(
    agg: &'a Aggregates,
    slice: &'a str,
    condition: Condition,
    style: Option<PromptStyle>,
) -> impl Iterator<Item = &'a AggregateRow> {
    agg.rows
        .iter()
        .filter(move |r| r.slice == slice && r.condition == condition && (r.style == style || r.model == HUMAN_LABEL))
}

fn ppl_backends(config: &ExperimentConfig) -> Vec<String> {
    config.perplexity.iter().map(|b| b.id.clone()).collect()
}

/// Generation × prompt comparison on the pooled slice.
pub fn prompt_comparison_md(agg: &Aggregates, config: &ExperimentConfig) -> String {
    let mut out = String::from("# Prompt comparison\n\nStandard narratives, all datasets, min|max over repeats.\n\n");
    let header: Vec<String> = ["Generation", "Prompt", "RA", "SA", "VA"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for m in &config.models {
        for &style in &config.styles {
            if let Some(r) = agg.rows.iter().find(|r| {
                r.slice == ALL_DATASETS
                    && r.model == m.label
                    && r.style == Some(style)
                    && r.condition == Condition::Standard
            }) {
                rows.push(vec![
                    r.model.clone(),
                    style.to_string(),
                    minmax_cell(r.ra, 3),
                    minmax_cell(r.sa, 3),
                    minmax_cell(r.va, 3),
                ]);
            }
        }
    }
    md_table(&mut out, &header, &rows);
    out
}

fn results_section(out: &mut String, agg: &Aggregates, config: &ExperimentConfig, slice: &str, style: PromptStyle) {
    let backends = ppl_backends(config);
    let _ = writeln!(out, "## {slice}, {style} prompt\n");
    let mut header: Vec<String> = ["Standard", "RA", "SA", "VA", "cos(θ)"].map(String::from).to_vec();
    header.extend(backends.iter().map(|b| format!("PPL ({b})")));
    let mut rows = Vec::new();
    for r in rows_for(agg, slice, Condition::Standard, Some(style)) {
        let mut row = vec![
            r.model.clone(),
            minmax_cell(r.ra, 3),
            minmax_cell(r.sa, 3),
            minmax_cell(r.va, 3),
            minmax_cell(r.cos, 3),
        ];
        row.extend(backends.iter().map(|b| minmax_cell(r.ppl.get(b).copied(), 0)));
        rows.push(row);
    }
    md_table(out, &header, &rows);

    if config.conditions.contains(&Condition::Manipulated) {
        out.push('\n');
        let mut header: Vec<String> = ["Manipulated", "RA", "SA", "VA", "Δcos(θ)"].map(String::from).to_vec();
        header.extend(backends.iter().map(|b| format!("ΔPPL ({b})")));
        let mut rows = Vec::new();
        for r in rows_for(agg, slice, Condition::Manipulated, Some(style)) {
            let d = r.delta.clone().unwrap_or_default();
            let mut row = vec![
                r.model.clone(),
                minmax_cell(r.ra, 3),
                minmax_cell(r.sa, 3),
                minmax_cell(r.va, 3),
                minmax_cell(d.cos, 4),
            ];
            row.extend(backends.iter().map(|b| minmax_cell(d.ppl.get(b).copied(), 0)));
            rows.push(row);
        }
        md_table(out, &header, &rows);
    }
    out.push('\n');
}

/// Standard and manipulated metrics, pooled first and then per dataset.
pub fn results_md(agg: &Aggregates, config: &ExperimentConfig) -> String {
    let mut out = String::from(
        "# Results\n\nmin|max over repeats of per-repeat means. RA/SA/VA are scored against the original tables.\n",
    );
    if !config.perplexity.is_empty() {
        let _ = writeln!(out, "{PPL_CAVEAT}");
    }
    if !agg.gaps.is_empty() {
        let _ = writeln!(
            out,
            "\nPartial aggregation: {} expected cell(s) missing.",
            agg.gaps.len()
        );
    }
    out.push('\n');
    let slices = std::iter::once(ALL_DATASETS).chain(config.datasets.iter().map(String::as_str));
    for slice in slices {
        for &style in &config.styles {
            results_section(&mut out, agg, config, slice, style);
        }
    }
    out
}

pub fn confusion_md(agg: &Aggregates) -> String {
    let mut out = String::from(
        "# Extraction validation\n\nNegatives: narratives generated from randomly permuted tables. \
         Positives: human narratives.\n\n",
    );
    let header: Vec<String> = [
        "Generation",
        "Prompt",
        "Repeat",
        "True Neg.",
        "False Pos.",
        "False Neg.",
        "True Pos.",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = agg
        .confusion
        .iter()
        .map(|c| {
            let mut row = vec![c.model.clone(), c.style.to_string(), c.repeat.to_string()];
            row.extend(c.confusion.cells());
            row
        })
        .collect();
    md_table(&mut out, &header, &rows);
    out
}

pub fn similarity_md(agg: &Aggregates) -> String {
    let mut out = String::from(
        "# Nearest-match experiment\n\nFor each human narrative, whether the closest generated narrative \
         (cosine distance) is the one from the same instance.\n\n",
    );
    let header: Vec<String> = ["Generation", "Prompt", "Repeat", "Self matches", "Ties"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = agg
        .matches
        .iter()
        .map(|m| {
            vec![
                m.model.clone(),
                m.style.to_string(),
                m.repeat.to_string(),
                format!("{}/{}", m.self_match_count, m.total),
                m.ties.to_string(),
            ]
        })
        .collect();
    md_table(&mut out, &header, &rows);
    out
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Input(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))
}

/// `(metric, value)` pairs of a row, unrounded.
pub fn row_metrics(r: &AggregateRow) -> Vec<(String, MinMax)> {
    let mut out = Vec::new();
    let mut push = |name: &str, mm: Option<MinMax>| {
        if let Some(mm) = mm {
            out.push((name.to_string(), mm));
        }
    };
    push("ra", r.ra);
    push("sa", r.sa);
    push("va", r.va);
    push("ra_given", r.ra_given);
    push("sa_given", r.sa_given);
    push("va_given", r.va_given);
    push("cos", r.cos);
    for (b, mm) in &r.ppl {
        push(&format!("ppl_{b}"), Some(*mm));
    }
    if let Some(d) = &r.delta {
        push("delta_ra", d.ra);
        push("delta_sa", d.sa);
        push("delta_va", d.va);
        push("delta_cos", d.cos);
        for (b, mm) in &d.ppl {
            push(&format!("delta_ppl_{b}"), Some(*mm));
        }
    }
    out
}

pub fn aggregates_csv(agg: &Aggregates) -> Result<Vec<u8>> {
    let rows = agg.rows.iter().flat_map(|r| {
        row_metrics(r).into_iter().map(move |(metric, mm)| {
            vec![
                r.slice.clone(),
                r.model.clone(),
                style_name(r.style).to_string(),
                r.condition.to_string(),
                r.repeats.to_string(),
                r.narratives.to_string(),
                metric,
                mm.min.to_string(),
                mm.max.to_string(),
            ]
        })
    });
    csv_bytes(
        &[
            "slice",
            "model",
            "style",
            "condition",
            "repeats",
            "narratives",
            "metric",
            "min",
            "max",
        ],
        rows,
    )
}

pub fn swaps_csv(agg: &Aggregates) -> Result<Vec<u8>> {
    let rows = agg.swaps.iter().map(|s| {
        vec![
            s.model.clone(),
            s.count.feature_name.clone(),
            s.count.direction.to_string(),
            s.count.value_side.to_string(),
            s.count.count.to_string(),
        ]
    });
    csv_bytes(&["model", "feature", "direction", "value_side", "count"], rows)
}

pub fn scatter_csv(agg: &Aggregates) -> Result<Vec<u8>> {
    let rows = agg.scatter.iter().map(|s| {
        vec![
            s.model.clone(),
            s.style.to_string(),
            s.repeat.to_string(),
            s.row.reference_id.clone(),
            s.row.candidate_id.clone(),
            s.row.distance.to_string(),
            s.row.is_paired.to_string(),
        ]
    });
    csv_bytes(
        &[
            "model",
            "style",
            "repeat",
            "reference_id",
            "candidate_id",
            "distance",
            "is_paired",
        ],
        rows,
    )
}

pub fn confusion_csv(agg: &Aggregates) -> Result<Vec<u8>> {
    let rows = agg.confusion.iter().map(|c| {
        vec![
            c.model.clone(),
            c.style.to_string(),
            c.repeat.to_string(),
            c.confusion.tn.to_string(),
            c.confusion.fp.to_string(),
            c.confusion.fn_.to_string(),
            c.confusion.tp.to_string(),
        ]
    });
    csv_bytes(&["model", "style", "repeat", "tn", "fp", "fn", "tp"], rows)
}

/// Writes the requested formats into `out_dir` and returns the written paths.
pub fn emit(agg: &Aggregates, config: &ExperimentConfig, out_dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::store(out_dir, e))?;
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    if formats.contains(&Format::Md) {
        files.push(("prompt_comparison.md", prompt_comparison_md(agg, config).into_bytes()));
        files.push(("results.md", results_md(agg, config).into_bytes()));
        files.push(("confusion.md", confusion_md(agg).into_bytes()));
        files.push(("similarity.md", similarity_md(agg).into_bytes()));
    }
    if formats.contains(&Format::Csv) {
        files.push(("aggregates.csv", aggregates_csv(agg)?));
        files.push(("swaps.csv", swaps_csv(agg)?));
        files.push(("similarity_scatter.csv", scatter_csv(agg)?));
        files.push(("confusion.csv", confusion_csv(agg)?));
    }
    if formats.contains(&Format::Json) {
        let mut bytes = serde_json::to_vec_pretty(agg).expect("aggregates serialize");
        bytes.push(b'\n');
        files.push(("aggregates.json", bytes));
    }
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = out_dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

pub fn pair_deltas_csv(deltas: &[crate::assumptions::PairDelta]) -> Result<Vec<u8>> {
    let rows = deltas.iter().map(|d| {
        vec![
            d.pair_id.to_string(),
            d.feature.clone(),
            d.backend.clone(),
            d.ppl_original.to_string(),
            d.ppl_manipulated.to_string(),
            d.delta.to_string(),
        ]
    });
    csv_bytes(
        &[
            "pair_id",
            "feature",
            "backend",
            "ppl_original",
            "ppl_manipulated",
            "delta",
        ],
        rows,
    )
}
