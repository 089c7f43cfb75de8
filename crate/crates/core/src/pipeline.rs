//! Generate → extract for one instance under one condition.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::error::{Error, Result};
use crate::explanation::TruncatedTable;
use crate::extraction::{parse_extraction, ExtractionRecord};
use crate::gateway::{ChatRequest, Gateway};
use crate::prompt::{build_extraction_prompt, build_generation_prompt, GenerationSpec, PromptStyle, TemplateSet};

pub const DEFAULT_MAX_REPAIRS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Llm,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Standard,
    Manipulated,
    Permuted,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Standard, Condition::Manipulated, Condition::Permuted];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Standard => "standard",
            Condition::Manipulated => "manipulated",
            Condition::Permuted => "permuted",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition `{s}`")))
    }
}

/// A provider plus the model name it serves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelTarget {
    pub provider: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrativeRecord {
    pub dataset_id: String,
    pub instance_id: String,
    pub text: String,
    pub source: Source,
    /// `None` for human narratives.
    pub model: Option<String>,
    pub prompt_style: Option<PromptStyle>,
    pub condition: Condition,
    pub run_index: usize,
    pub template_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub narrative: NarrativeRecord,
    pub extraction: ExtractionRecord,
    pub repair_attempts: usize,
}

pub struct GenerationRequest<'a> {
    pub table: &'a TruncatedTable,
    pub spec: &'a GenerationSpec,
    pub dataset_description: &'a str,
    pub target: &'a ModelTarget,
    pub temperature: f64,
    pub condition: Condition,
    pub run_index: usize,
}

pub fn generate_narrative(
    gateway: &Gateway,
    templates: &TemplateSet,
    req: &GenerationRequest<'_>,
) -> Result<NarrativeRecord> {
    let prompt = build_generation_prompt(templates, req.table, req.spec, req.dataset_description)?;
    let mut chat = ChatRequest::new(&req.target.provider, &req.target.model, prompt.text).salted(req.run_index as u64);
    chat.temperature = req.temperature;
    let text = gateway.chat(&chat).map_err(|e| {
        warn!(
            dataset = %req.table.dataset_id,
            instance = %req.table.instance_id,
            model = %req.target.model,
            error = %e,
            "generation failed"
        );
        e
    })?;
    if text.trim().is_empty() {
        return Err(Error::Inconsistency {
            provider: req.target.provider.clone(),
            detail: format!("empty narrative for {}/{}", req.table.dataset_id, req.table.instance_id),
        });
    }
    Ok(NarrativeRecord {
        dataset_id: req.table.dataset_id.clone(),
        instance_id: req.table.instance_id.clone(),
        text,
        source: Source::Llm,
        model: Some(req.target.model.clone()),
        prompt_style: Some(req.spec.style),
        condition: req.condition,
        run_index: req.run_index,
        template_hash: Some(prompt.template_hash),
    })
}

fn check_reply(raw: &str, feature_set: &[String], n: usize) -> std::result::Result<ExtractionRecord, String> {
    match parse_extraction(raw, feature_set, n) {
        Ok(rec) if rec.entries.is_empty() => Err("the reply contains no feature entries".into()),
        Ok(rec) => Ok(rec),
        Err(Error::Parse(msg)) => Err(msg),
        Err(e) => Err(e.to_string()),
    }
}

fn repair_prompt(original: &str, error: &str) -> String {
    format!(
        "{original}\n\nYour previous reply could not be used: {error}. \
         Reply again with only the JSON object described above."
    )
}

/// Extracts `narrative` with up to `max_repairs` re-prompts. Unusable replies
/// yield a failure record rather than an error; provider errors propagate.
pub fn extract_narrative(
    gateway: &Gateway,
    templates: &TemplateSet,
    narrative: &NarrativeRecord,
    feature_set: &[String],
    n: usize,
    extractor: &ModelTarget,
    max_repairs: usize,
) -> Result<(ExtractionRecord, usize)> {
    let base = build_extraction_prompt(templates, &narrative.text, feature_set)?;
    let mut prompt = base.text.clone();
    let mut attempt = 0;
    loop {
        let req =
            ChatRequest::new(&extractor.provider, &extractor.model, prompt.clone()).salted(narrative.run_index as u64);
        let raw = gateway.chat(&req)?;
        match check_reply(&raw, feature_set, n) {
            Ok(rec) => return Ok((rec, attempt)),
            Err(msg) if attempt < max_repairs => {
                debug!(instance = %narrative.instance_id, attempt, error = %msg, "repairing extraction");
                attempt += 1;
                prompt = repair_prompt(&base.text, &msg);
            }
            Err(msg) => {
                warn!(instance = %narrative.instance_id, error = %msg, "extraction failed");
                return Ok((ExtractionRecord::failed(msg), attempt));
            }
        }
    }
}

/// Loads `<dir>/<dataset_id>/<instance_id>.txt` files as human narratives.
pub fn load_human_narratives(dir: &Path, dataset_id: &str) -> Result<Vec<NarrativeRecord>> {
    let ds_dir = dir.join(dataset_id);
    let entries = std::fs::read_dir(&ds_dir).map_err(|e| Error::store(&ds_dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::store(&ds_dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let Some(instance_id) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::store(&path, e))?;
        if text.trim().is_empty() {
            return Err(Error::Input(format!("{} is empty", path.display())));
        }
        out.push(human_narrative(dataset_id, instance_id, text.trim()));
    }
    out.sort_by_key(|n| natural_key(&n.instance_id));
    Ok(out)
}

pub fn human_narrative(dataset_id: &str, instance_id: &str, text: &str) -> NarrativeRecord {
    NarrativeRecord {
        dataset_id: dataset_id.to_string(),
        instance_id: instance_id.to_string(),
        text: text.to_string(),
        source: Source::Human,
        model: None,
        prompt_style: None,
        condition: Condition::Standard,
        run_index: 0,
        template_hash: None,
    }
}

/// Orders `"2"` before `"10"`; non-numeric ids sort after numeric ones, lexically.
pub fn natural_key(id: &str) -> (u8, u64, String) {
    match id.parse::<u64>() {
        Ok(n) => (0, n, String::new()),
        Err(_) => (1, 0, id.to_string()),
    }
}
