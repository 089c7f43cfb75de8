//! The experiment matrix: models × prompt styles × datasets × conditions × repeats.

pub mod aggregate;
pub mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::assumptions::{narrative_mean_ppl, score_assumptions, LogprobBackend};
use crate::error::{Error, Result};
use crate::explanation::{ground_truth, truncate, ShapTable, TruncatedTable, DEFAULT_TRUNCATION};
use crate::extraction::ExtractionRecord;
use crate::faithfulness::{agreement, classify, ValueTolerance};
use crate::gateway::{Gateway, ProviderConfig, DEFAULT_CONCURRENCY};
use crate::manipulation::{invert_and_flip, random_shap_permutation, ManipulationProvenance};
use crate::pipeline::{
    extract_narrative, generate_narrative, load_human_narratives, natural_key, Condition, GenerationRequest,
    ModelTarget, NarrativeRecord, DEFAULT_MAX_REPAIRS,
};
use crate::prompt::{GenerationSpec, PromptStyle, TemplateSet};
use crate::similarity::cosine;

pub use aggregate::{aggregate, AggregateRow, Aggregates, MinMax};
pub use store::{CellId, MetricsRecord, RunSnapshot, RunStore, HUMAN_LABEL};
use store::{FailureRecord, StoredEmbedding, StoredExtraction, StoredNarrative};

pub const DESCRIPTION_FILE: &str = "description.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

fn default_run_id() -> String {
    "run".into()
}
fn default_styles() -> Vec<PromptStyle> {
    vec![PromptStyle::Long, PromptStyle::Short]
}
fn default_conditions() -> Vec<Condition> {
    Condition::ALL.to_vec()
}
fn default_repeats() -> usize {
    4
}
fn default_n() -> usize {
    DEFAULT_TRUNCATION
}
fn default_concurrency() -> usize {
    DEFAULT_CONCURRENCY
}
fn default_max_repairs() -> usize {
    DEFAULT_MAX_REPAIRS
}
fn default_swap_min() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Row label in reports.
    pub label: String,
    pub provider: String,
    pub model: String,
}

impl ModelSpec {
    pub fn target(&self) -> ModelTarget {
        ModelTarget {
            provider: self.provider.clone(),
            model: self.model.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    /// Holds `<dataset>/<instance>.json` and `<dataset>/description.txt`.
    pub instances_dir: PathBuf,
    /// Holds `<dataset>/<instance>.txt` human reference narratives.
    #[serde(default)]
    pub human_dir: Option<PathBuf>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    pub datasets: Vec<String>,
    /// Restricts every dataset to these instance ids; empty means all.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instances: Vec<String>,
    #[serde(default = "default_styles")]
    pub styles: Vec<PromptStyle>,
    #[serde(default = "default_conditions")]
    pub conditions: Vec<Condition>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Base seed for random SHAP permutations.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_max_repairs")]
    pub max_repairs: usize,
    #[serde(default)]
    pub value_tolerance: ValueTolerance,
    #[serde(default = "default_swap_min")]
    pub swap_min_occurrences: usize,
    /// Aggregate whatever is present instead of refusing incomplete slices.
    #[serde(default)]
    pub allow_partial: bool,
    pub models: Vec<ModelSpec>,
    pub extraction: ModelTarget,
    #[serde(default)]
    pub embedding: Option<ModelTarget>,
    #[serde(default)]
    pub perplexity: Vec<LogprobBackend>,
    pub providers: BTreeMap<String, ProviderConfig>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, toml_syntax: bool) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = if toml_syntax {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        Ok(cfg)
    }

    /// Reads a `.toml` or `.json` config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::store(path, e))?;
        let is_json = path.extension().and_then(|e| e.to_str()) == Some("json");
        let mut cfg = Self::parse(&text, !is_json)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.instances_dir);
        if let Some(p) = self.human_dir.as_mut() {
            resolve(base, p);
        }
        if let Some(p) = self.templates_dir.as_mut() {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad(format!("temperature {} must be >= 0", self.temperature));
        }
        for (what, empty) in [
            ("datasets", self.datasets.is_empty()),
            ("styles", self.styles.is_empty()),
            ("conditions", self.conditions.is_empty()),
            ("models", self.models.is_empty()),
        ] {
            if empty {
                return bad(format!("`{what}` must not be empty"));
            }
        }
        let mut labels = BTreeSet::new();
        for m in &self.models {
            if m.label == HUMAN_LABEL || !labels.insert(m.label.as_str()) {
                return bad(format!("model label `{}` is reserved or repeated", m.label));
            }
        }
        let mut providers: Vec<&str> = self.models.iter().map(|m| m.provider.as_str()).collect();
        providers.push(&self.extraction.provider);
        providers.extend(self.embedding.iter().map(|e| e.provider.as_str()));
        providers.extend(self.perplexity.iter().map(|p| p.provider.as_str()));
        for p in providers {
            if !self.providers.contains_key(p) {
                return bad(format!("provider `{p}` is used but not defined under [providers]"));
            }
        }
        Ok(())
    }

    pub fn templates(&self) -> Result<TemplateSet> {
        match &self.templates_dir {
            Some(dir) => TemplateSet::load(dir),
            None => Ok(TemplateSet::builtin()),
        }
    }
}

/// One dataset's instances, in natural instance-id order.
#[derive(Debug, Clone)]
pub struct DatasetInput {
    pub id: String,
    pub description: String,
    pub tables: Vec<ShapTable>,
}

pub fn load_dataset(instances_dir: &Path, dataset: &str) -> Result<DatasetInput> {
    let dir = instances_dir.join(dataset);
    let mut tables = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::store(&dir, e))? {
        let path = entry.map_err(|e| Error::store(&dir, e))?.path();
        let is_json = path.extension().and_then(|e| e.to_str()) == Some("json");
        if !is_json || path.file_name().and_then(|n| n.to_str()) == Some(MANIFEST_FILE) {
            continue;
        }
        let table = ShapTable::load(&path)?;
        if table.dataset_id != dataset {
            return Err(Error::Input(format!(
                "{} declares dataset `{}` but lives under `{dataset}`",
                path.display(),
                table.dataset_id
            )));
        }
        tables.push(table);
    }
    if tables.is_empty() {
        return Err(Error::Input(format!("no instance files under {}", dir.display())));
    }
    tables.sort_by_key(|t| natural_key(&t.instance_id));
    if let Some(w) = tables.windows(2).find(|w| w[0].instance_id == w[1].instance_id) {
        return Err(Error::Input(format!(
            "instance `{}` appears twice in `{dataset}`",
            w[0].instance_id
        )));
    }
    let desc_path = dir.join(DESCRIPTION_FILE);
    let description = match std::fs::read_to_string(&desc_path) {
        Ok(t) => t.trim().to_string(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            warn!(dataset, "no description.txt; prompts get an empty dataset description");
            String::new()
        }
        Err(e) => return Err(Error::store(desc_path, e)),
    };
    Ok(DatasetInput {
        id: dataset.to_string(),
        description,
        tables,
    })
}

/// Every configured dataset, narrowed to `config.instances` when set.
pub fn load_datasets(config: &ExperimentConfig) -> Result<Vec<DatasetInput>> {
    let mut datasets: Vec<DatasetInput> = config
        .datasets
        .iter()
        .map(|d| load_dataset(&config.instances_dir, d))
        .collect::<Result<_>>()?;
    if config.instances.is_empty() {
        return Ok(datasets);
    }
    for id in &config.instances {
        if !datasets.iter().any(|d| d.tables.iter().any(|t| &t.instance_id == id)) {
            return Err(Error::Config(format!(
                "instance `{id}` not found in any configured dataset"
            )));
        }
    }
    for d in &mut datasets {
        d.tables.retain(|t| config.instances.contains(&t.instance_id));
    }
    datasets.retain(|d| !d.tables.is_empty());
    Ok(datasets)
}

/// Permutation seed for one instance; independent of model, style and repeat.
pub fn permutation_seed(base: u64, dataset: &str, instance: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(dataset.as_bytes());
    h.update([0]);
    h.update(instance.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// The table handed to the generator under `condition`.
pub fn condition_table(
    table: &TruncatedTable,
    condition: Condition,
    seed: u64,
) -> Result<(TruncatedTable, Option<ManipulationProvenance>)> {
    match condition {
        Condition::Standard => Ok((table.clone(), None)),
        Condition::Manipulated => invert_and_flip(table).map(|m| (m.table, Some(m.provenance))),
        Condition::Permuted => {
            let seed = permutation_seed(seed, &table.dataset_id, &table.instance_id);
            random_shap_permutation(table, seed).map(|m| (m.table, Some(m.provenance)))
        }
    }
}

pub struct ScoredNarrative {
    pub extraction: ExtractionRecord,
    /// `cos` is left unset.
    pub metrics: MetricsRecord,
}

/// Extracts `narrative` and scores it against `original`, and against `given` when that differs.
#[allow(clippy::too_many_arguments)]
pub fn score_narrative(
    config: &ExperimentConfig,
    gateway: &Gateway,
    templates: &TemplateSet,
    cell: &CellId,
    narrative: &NarrativeRecord,
    original: &TruncatedTable,
    given: &TruncatedTable,
    feature_set: &[String],
) -> Result<ScoredNarrative> {
    let (extraction, repairs) = extract_narrative(
        gateway,
        templates,
        narrative,
        feature_set,
        config.n,
        &config.extraction,
        config.max_repairs,
    )?;
    let gt = ground_truth(original)?;
    let scores = agreement(&extraction, &gt, &config.value_tolerance);
    let agreement_given = if given == original {
        None
    } else {
        Some(agreement(&extraction, &ground_truth(given)?, &config.value_tolerance))
    };
    let verdict = classify(&extraction, &gt);

    let mut ppl = BTreeMap::new();
    let mut assumptions_scored = 0;
    if !config.perplexity.is_empty() && !extraction.is_failure() {
        let scored = score_assumptions(&extraction, &config.perplexity, gateway)?;
        assumptions_scored = scored.len();
        for b in &config.perplexity {
            if let Some(m) = narrative_mean_ppl(&scored, &b.id) {
                ppl.insert(b.id.clone(), m);
            }
        }
    }
    let metrics = MetricsRecord {
        cell: cell.clone(),
        source: narrative.source,
        agreement: scores,
        agreement_given,
        verdict,
        extraction_failed: extraction.is_failure(),
        repair_attempts: repairs,
        anomalies: extraction.anomalies.len(),
        ppl,
        assumptions_scored,
        cos: None,
    };
    Ok(ScoredNarrative { extraction, metrics })
}

struct Instance<'a> {
    dataset: &'a DatasetInput,
    table: &'a ShapTable,
    truncated: TruncatedTable,
    feature_set: Vec<String>,
    human: Option<&'a NarrativeRecord>,
    human_embedding: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub cells: usize,
    pub executed: usize,
    pub resumed: usize,
    pub failed: usize,
}

enum Outcome {
    Executed,
    Resumed,
    Failed,
}

struct Ctx<'a> {
    config: &'a ExperimentConfig,
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
    store: &'a RunStore,
}

impl Ctx<'_> {
    fn embedding_record(
        &self,
        cell: Option<&CellId>,
        id: String,
        key: String,
        text: &str,
    ) -> Result<Option<StoredEmbedding>> {
        let Some(target) = &self.config.embedding else {
            return Ok(None);
        };
        let v = self.gateway.embed(text, &target.provider, &target.model)?;
        Ok(Some(StoredEmbedding {
            cell: cell.cloned(),
            id,
            key,
            model: v.model,
            values: v.values,
        }))
    }

    /// Runs one cell. Only store errors escape; everything else becomes a failure record.
    fn cell(&self, cell: &CellId, inst: &Instance<'_>, model: Option<&ModelSpec>) -> Result<Outcome> {
        let rel = cell.rel_path();
        if self.store.exists(store::METRICS, &rel) {
            return Ok(Outcome::Resumed);
        }
        match self.execute(cell, inst, model) {
            Ok(()) => {
                self.store.remove(store::FAILURES, &rel)?;
                Ok(Outcome::Executed)
            }
            Err(e @ Error::Store { .. }) => Err(e),
            Err(e) => {
                warn!(cell = %cell.label(), error = %e, "cell failed");
                self.store.write_json(
                    store::FAILURES,
                    &rel,
                    &FailureRecord {
                        cell: cell.clone(),
                        error: e.to_string(),
                    },
                )?;
                Ok(Outcome::Failed)
            }
        }
    }

    fn execute(&self, cell: &CellId, inst: &Instance<'_>, model: Option<&ModelSpec>) -> Result<()> {
        let cfg = self.config;
        let rel = cell.rel_path();
        let (given, manipulation, narrative) = match model {
            Some(m) => {
                let (given, provenance) = condition_table(&inst.truncated, cell.condition, cfg.seed)?;
                let spec = GenerationSpec::new(cell.style.expect("model cells carry a style"), given.n());
                let target = m.target();
                let req = GenerationRequest {
                    table: &given,
                    spec: &spec,
                    dataset_description: &inst.dataset.description,
                    target: &target,
                    temperature: cfg.temperature,
                    condition: cell.condition,
                    run_index: cell.repeat,
                };
                let narrative = generate_narrative(self.gateway, self.templates, &req)?;
                (given, provenance, narrative)
            }
            None => {
                let mut human = inst.human.expect("human cells have a narrative").clone();
                human.run_index = cell.repeat;
                (inst.truncated.clone(), None, human)
            }
        };
        self.store.write_json(
            store::NARRATIVES,
            &rel,
            &StoredNarrative {
                cell: cell.clone(),
                narrative: narrative.clone(),
                table: given.clone(),
                manipulation,
            },
        )?;

        let mut scored = score_narrative(
            cfg,
            self.gateway,
            self.templates,
            cell,
            &narrative,
            &inst.truncated,
            &given,
            &inst.feature_set,
        )?;
        self.store.write_json(
            store::EXTRACTIONS,
            &rel,
            &StoredExtraction {
                cell: cell.clone(),
                extraction: scored.extraction,
                repair_attempts: scored.metrics.repair_attempts,
            },
        )?;

        if model.is_none() {
            scored.metrics.cos = inst.human_embedding.map(|h| cosine(h, h)).transpose()?;
        } else if let Some(emb) =
            self.embedding_record(Some(cell), cell.label(), cell.instance_key(), &narrative.text)?
        {
            if let Some(reference) = inst.human_embedding {
                scored.metrics.cos = Some(cosine(&emb.values, reference)?);
            }
            self.store.write_json(store::EMBEDDINGS, &rel, &emb)?;
        }
        let metrics = scored.metrics;
        // written last: its presence marks the cell complete
        self.store.write_json(store::METRICS, &rel, &metrics)
    }
}

/// Every cell of the matrix for the given instances, in a fixed order.
pub fn matrix_cells(config: &ExperimentConfig, snapshot: &RunSnapshot) -> Vec<(CellId, bool)> {
    let mut cells = Vec::new();
    for repeat in 0..config.repeats {
        for m in &config.models {
            for &style in &config.styles {
                for &condition in &config.conditions {
                    for ds in &config.datasets {
                        for inst in snapshot.instances.get(ds).into_iter().flatten() {
                            cells.push((
                                CellId {
                                    model: m.label.clone(),
                                    style: Some(style),
                                    condition,
                                    repeat,
                                    dataset: ds.clone(),
                                    instance: inst.clone(),
                                },
                                false,
                            ));
                        }
                    }
                }
            }
        }
        for ds in &config.datasets {
            for inst in snapshot.human.get(ds).into_iter().flatten() {
                cells.push((
                    CellId {
                        model: HUMAN_LABEL.into(),
                        style: None,
                        condition: Condition::Standard,
                        repeat,
                        dataset: ds.clone(),
                        instance: inst.clone(),
                    },
                    true,
                ));
            }
        }
    }
    cells
}

/// Executes (or resumes) the run described by `config` under `runs_dir/<run_id>`.
pub fn run(config: &ExperimentConfig, gateway: &Gateway, runs_dir: &Path) -> Result<(RunStore, RunSummary)> {
    config.validate()?;
    let templates = config.templates()?;
    let datasets = load_datasets(config)?;

    let mut humans: HashMap<(String, String), NarrativeRecord> = HashMap::new();
    if let Some(dir) = &config.human_dir {
        for ds in &datasets {
            if !dir.join(&ds.id).is_dir() {
                warn!(dataset = %ds.id, "no human narratives");
                continue;
            }
            for h in load_human_narratives(dir, &ds.id)? {
                if ds.tables.iter().any(|t| t.instance_id == h.instance_id) {
                    humans.insert((h.dataset_id.clone(), h.instance_id.clone()), h);
                } else {
                    warn!(dataset = %ds.id, instance = %h.instance_id, "human narrative without instance file ignored");
                }
            }
        }
    }

    let snapshot = RunSnapshot {
        config: config.clone(),
        templates: templates.fingerprints(),
        instances: datasets
            .iter()
            .map(|d| (d.id.clone(), d.tables.iter().map(|t| t.instance_id.clone()).collect()))
            .collect(),
        human: datasets
            .iter()
            .map(|d| {
                let ids = d
                    .tables
                    .iter()
                    .filter(|t| humans.contains_key(&(d.id.clone(), t.instance_id.clone())))
                    .map(|t| t.instance_id.clone())
                    .collect();
                (d.id.clone(), ids)
            })
            .collect(),
    };
    let store = RunStore::create(runs_dir, &config.run_id)?;
    store.init_snapshot(&snapshot)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;

    let ctx = Ctx {
        config,
        gateway,
        templates: &templates,
        store: &store,
    };
    // reference embeddings are computed once and shared by every cell
    let mut human_keys: Vec<&(String, String)> = humans.keys().collect();
    human_keys.sort();
    let human_embeddings: HashMap<(String, String), StoredEmbedding> = pool.install(|| {
        human_keys
            .par_iter()
            .map(|k| {
                let h = &humans[*k];
                let id = format!("{HUMAN_LABEL}/{}/{}", h.dataset_id, h.instance_id);
                let emb = ctx.embedding_record(None, id, format!("{}/{}", h.dataset_id, h.instance_id), &h.text)?;
                Ok(emb.map(|e| ((*k).clone(), e)))
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().flatten().collect())
    })?;
    for ((ds, inst), emb) in &human_embeddings {
        let rel = PathBuf::from(HUMAN_LABEL).join(ds).join(format!("{inst}.json"));
        store.write_json(store::EMBEDDINGS, &rel, emb)?;
    }

    let mut instances: HashMap<(String, String), Instance<'_>> = HashMap::new();
    for ds in &datasets {
        for t in &ds.tables {
            let key = (ds.id.clone(), t.instance_id.clone());
            let truncated = truncate(t, config.n)?;
            ground_truth(&truncated)?;
            instances.insert(
                key.clone(),
                Instance {
                    dataset: ds,
                    table: t,
                    truncated,
                    feature_set: t.feature_set(),
                    human: humans.get(&key),
                    human_embedding: human_embeddings.get(&key).map(|e| e.values.as_slice()),
                },
            );
        }
    }

    let cells = matrix_cells(config, &snapshot);
    info!(cells = cells.len(), run = %store.root().display(), "running matrix");
    let models: HashMap<&str, &ModelSpec> = config.models.iter().map(|m| (m.label.as_str(), m)).collect();
    let outcomes: Vec<Outcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|(cell, is_human)| {
                let inst = &instances[&(cell.dataset.clone(), cell.instance.clone())];
                debug_assert_eq!(inst.table.instance_id, cell.instance);
                let model = if *is_human {
                    None
                } else {
                    Some(models[cell.model.as_str()])
                };
                ctx.cell(cell, inst, model)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut summary = RunSummary {
        cells: cells.len(),
        ..Default::default()
    };
    for o in outcomes {
        match o {
            Outcome::Executed => summary.executed += 1,
            Outcome::Resumed => summary.resumed += 1,
            Outcome::Failed => summary.failed += 1,
        }
    }
    info!(?summary, "run finished");
    Ok((store, summary))
}
