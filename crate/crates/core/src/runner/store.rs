//! Directory-backed run store.
//!
//! ```text
//! runs/<run_id>/
//!   config.json
//!   narratives/<cell>.json
//!   extractions/<cell>.json
//!   metrics/<cell>.json
//!   embeddings/<cell>.json
//!   failures/<cell>.json
//!   aggregates/
//! ```
//!
//! `<cell>` is `<model>/<style>/<condition>/r<repeat>/<dataset>/<instance>`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explanation::TruncatedTable;
use crate::extraction::ExtractionRecord;
use crate::faithfulness::{AgreementScores, ClassifierVerdict};
use crate::gateway::cache::{path_component, write_atomic};
use crate::manipulation::ManipulationProvenance;
use crate::pipeline::{Condition, NarrativeRecord, Source};
use crate::prompt::PromptStyle;

use super::ExperimentConfig;

pub const CONFIG_FILE: &str = "config.json";
pub const NARRATIVES: &str = "narratives";
pub const EXTRACTIONS: &str = "extractions";
pub const METRICS: &str = "metrics";
pub const EMBEDDINGS: &str = "embeddings";
pub const FAILURES: &str = "failures";
pub const AGGREGATES: &str = "aggregates";

/// Model label used for human reference narratives.
pub const HUMAN_LABEL: &str = "human";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub model: String,
    pub style: Option<PromptStyle>,
    pub condition: Condition,
    pub repeat: usize,
    pub dataset: String,
    pub instance: String,
}

impl CellId {
    pub fn rel_path(&self) -> PathBuf {
        PathBuf::from(path_component(&self.model))
            .join(self.style.map_or("none", PromptStyle::as_str))
            .join(self.condition.as_str())
            .join(format!("r{}", self.repeat))
            .join(path_component(&self.dataset))
            .join(format!("{}.json", path_component(&self.instance)))
    }

    /// Pairs narratives of the same instance across models.
    pub fn instance_key(&self) -> String {
        format!("{}/{}", self.dataset, self.instance)
    }

    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/r{}/{}/{}",
            self.model,
            self.style.map_or("none", PromptStyle::as_str),
            self.condition,
            self.repeat,
            self.dataset,
            self.instance
        )
    }
}

/// What `config.json` holds: the effective configuration plus everything it resolved to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub config: ExperimentConfig,
    pub templates: BTreeMap<String, String>,
    /// dataset -> instance ids
    pub instances: BTreeMap<String, Vec<String>>,
    /// dataset -> instance ids with a human narrative
    pub human: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredNarrative {
    pub cell: CellId,
    pub narrative: NarrativeRecord,
    /// The table the narrative was generated from.
    pub table: TruncatedTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manipulation: Option<ManipulationProvenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredExtraction {
    pub cell: CellId,
    pub extraction: ExtractionRecord,
    pub repair_attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEmbedding {
    /// `None` for human reference narratives.
    pub cell: Option<CellId>,
    pub id: String,
    pub key: String,
    pub model: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub cell: CellId,
    pub source: Source,
    /// Scored against the original instance table.
    pub agreement: AgreementScores,
    /// Scored against the table given to the generator, for non-standard conditions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement_given: Option<AgreementScores>,
    pub verdict: ClassifierVerdict,
    pub extraction_failed: bool,
    pub repair_attempts: usize,
    pub anomalies: usize,
    /// Mean assumption perplexity per logprob backend.
    pub ppl: BTreeMap<String, f64>,
    pub assumptions_scored: usize,
    /// cos(θ) to the human narrative of the same instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cos: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub cell: CellId,
    pub error: String,
}

pub struct RunStore {
    root: PathBuf,
    writer: Mutex<()>,
}

fn to_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("record serializes");
    bytes.push(b'\n');
    bytes
}

impl RunStore {
    pub fn create(runs_dir: &Path, run_id: &str) -> Result<RunStore> {
        let root = runs_dir.join(path_component(run_id));
        std::fs::create_dir_all(&root).map_err(|e| Error::store(&root, e))?;
        Ok(RunStore {
            root,
            writer: Mutex::new(()),
        })
    }

    pub fn open(root: &Path) -> Result<RunStore> {
        let config = root.join(CONFIG_FILE);
        if !config.is_file() {
            return Err(Error::store(
                &config,
                std::io::Error::new(std::io::ErrorKind::NotFound, "not a run directory"),
            ));
        }
        Ok(RunStore {
            root: root.to_path_buf(),
            writer: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, section: &str, rel: &Path) -> PathBuf {
        self.root.join(section).join(rel)
    }

    pub fn exists(&self, section: &str, rel: &Path) -> bool {
        self.path(section, rel).is_file()
    }

    pub fn write_json<T: Serialize>(&self, section: &str, rel: &Path, value: &T) -> Result<()> {
        let path = self.path(section, rel);
        let bytes = to_pretty(value);
        let _guard = self.writer.lock().expect("store writer lock");
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::store(dir, e))?;
        }
        write_atomic(&path, &bytes)
    }

    pub fn read_json<T: DeserializeOwned>(&self, section: &str, rel: &Path) -> Result<T> {
        read_json_file(&self.path(section, rel))
    }

    pub fn remove(&self, section: &str, rel: &Path) -> Result<()> {
        let path = self.path(section, rel);
        let _guard = self.writer.lock().expect("store writer lock");
        match std::fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(Error::store(path, e)),
        }
    }

    /// All JSON files under `section`, sorted by path.
    pub fn list(&self, section: &str) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        let base = self.root.join(section);
        if base.is_dir() {
            walk(&base, &mut out)?;
        }
        out.sort();
        Ok(out)
    }

    pub fn read_all<T: DeserializeOwned>(&self, section: &str) -> Result<Vec<T>> {
        self.list(section)?.iter().map(|p| read_json_file(p)).collect()
    }

    pub fn snapshot(&self) -> Result<RunSnapshot> {
        read_json_file(&self.root.join(CONFIG_FILE))
    }

    /// Writes `config.json`, refusing to reuse a directory created for another configuration.
    pub fn init_snapshot(&self, snapshot: &RunSnapshot) -> Result<()> {
        let path = self.root.join(CONFIG_FILE);
        if path.is_file() {
            let existing: RunSnapshot = read_json_file(&path)?;
            if existing != *snapshot {
                return Err(Error::Config(format!(
                    "{} was created with a different configuration; choose another run_id",
                    self.root.display()
                )));
            }
            return Ok(());
        }
        write_atomic(&path, &to_pretty(snapshot))
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::store(dir, e))? {
        let path = entry.map_err(|e| Error::store(dir, e))?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else if path.extension().and_then(|e| e.to_str()) == Some("json") {
            out.push(path);
        }
    }
    Ok(())
}

pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::store(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::store(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
        )
    })
}
