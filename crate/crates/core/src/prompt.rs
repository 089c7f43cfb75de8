//! Generation and extraction prompts rendered from editable template files.
//!
//! Placeholders are written `{name}` and only the names in [`PLACEHOLDERS`] are
//! substituted; every other brace is literal text. Substitution is a single
//! left-to-right pass, so substituted values are never re-scanned.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::explanation::{render_table_block, TruncatedTable};

pub const PLACEHOLDERS: &[&str] = &[
    "dataset_description",
    "feature_table",
    "scores",
    "rules",
    "narrative",
    "feature_set",
];

pub const NARRATIVE_OPEN: &str = "<narrative>";
pub const NARRATIVE_CLOSE: &str = "</narrative>";

const BUILTIN_LONG: &str = include_str!("../templates/long.txt");
const BUILTIN_SHORT: &str = include_str!("../templates/short.txt");
const BUILTIN_EXTRACTION: &str = include_str!("../templates/extraction.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateStyle {
    Long,
    Short,
    Extraction,
}

impl TemplateStyle {
    pub fn file_name(self) -> &'static str {
        match self {
            TemplateStyle::Long => "long.txt",
            TemplateStyle::Short => "short.txt",
            TemplateStyle::Extraction => "extraction.txt",
        }
    }

    fn required(self) -> &'static [&'static str] {
        match self {
            TemplateStyle::Long | TemplateStyle::Short => &["feature_table", "scores"],
            TemplateStyle::Extraction => &["narrative", "feature_set"],
        }
    }
}

/// Prompt style used for narrative generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStyle {
    Long,
    Short,
}

impl PromptStyle {
    pub fn template(self) -> TemplateStyle {
        match self {
            PromptStyle::Long => TemplateStyle::Long,
            PromptStyle::Short => TemplateStyle::Short,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptStyle::Long => "long",
            PromptStyle::Short => "short",
        }
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long" => Ok(PromptStyle::Long),
            "short" => Ok(PromptStyle::Short),
            other => Err(Error::Config(format!("unknown prompt style `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub style: TemplateStyle,
    pub body: String,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn split_placeholders(body: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = body;
    let mut text_start = 0usize;
    let mut offset = 0usize;
    while let Some(pos) = rest.find('{') {
        let at = offset + pos;
        let after = &body[at + 1..];
        let slot = PLACEHOLDERS
            .iter()
            .find(|name| after.starts_with(*name) && after[name.len()..].starts_with('}'));
        match slot {
            Some(name) => {
                if text_start < at {
                    pieces.push(Piece::Text(&body[text_start..at]));
                }
                pieces.push(Piece::Slot(name));
                offset = at + name.len() + 2;
                text_start = offset;
            }
            None => offset = at + 1,
        }
        rest = &body[offset..];
    }
    if text_start < body.len() {
        pieces.push(Piece::Text(&body[text_start..]));
    }
    pieces
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, style: TemplateStyle, body: impl Into<String>) -> Result<Self> {
        let template = PromptTemplate {
            id: id.into(),
            style,
            body: body.into(),
        };
        let present = template.placeholders();
        for required in style.required() {
            if !present.contains(required) {
                return Err(Error::Config(format!(
                    "template `{}` is missing required placeholder {{{required}}}",
                    template.id
                )));
            }
        }
        Ok(template)
    }

    pub fn placeholders(&self) -> Vec<&str> {
        split_placeholders(&self.body)
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(name) => Some(name),
                Piece::Text(_) => None,
            })
            .collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.body.as_bytes()))
    }

    /// Single-pass substitution. Every placeholder in the body must have a value.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String> {
        let mut out = String::with_capacity(self.body.len() * 2);
        for piece in split_placeholders(&self.body) {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => {
                    let value = values.get(name).ok_or_else(|| {
                        Error::Config(format!(
                            "template `{}` uses {{{name}}} which this prompt does not provide",
                            self.id
                        ))
                    })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// The long, short and extraction templates, loaded once.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateStyle, PromptTemplate>,
}

impl TemplateSet {
    /// Templates compiled into the binary (the files under `crates/core/templates`).
    pub fn builtin() -> TemplateSet {
        let mut templates = BTreeMap::new();
        for (style, body) in [
            (TemplateStyle::Long, BUILTIN_LONG),
            (TemplateStyle::Short, BUILTIN_SHORT),
            (TemplateStyle::Extraction, BUILTIN_EXTRACTION),
        ] {
            let t = PromptTemplate::new(format!("builtin/{}", style.file_name()), style, body)
                .expect("builtin templates are valid");
            templates.insert(style, t);
        }
        TemplateSet { templates }
    }

    /// Loads `long.txt`, `short.txt` and `extraction.txt` from `dir`. Files that are
    /// absent are reported when a prompt of that style is requested.
    pub fn load(dir: &Path) -> Result<TemplateSet> {
        let mut templates = BTreeMap::new();
        for style in [TemplateStyle::Long, TemplateStyle::Short, TemplateStyle::Extraction] {
            let path = dir.join(style.file_name());
            match std::fs::read_to_string(&path) {
                Ok(body) => {
                    let t = PromptTemplate::new(path.display().to_string(), style, body)?;
                    templates.insert(style, t);
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(Error::store(path, e)),
            }
        }
        if templates.is_empty() {
            return Err(Error::Config(format!("no templates found in {}", dir.display())));
        }
        Ok(TemplateSet { templates })
    }

    pub fn get(&self, style: TemplateStyle) -> Result<&PromptTemplate> {
        self.templates
            .get(&style)
            .ok_or_else(|| Error::Config(format!("missing template {}", style.file_name())))
    }

    /// Template id and content hash per style, for run provenance.
    pub fn fingerprints(&self) -> BTreeMap<String, String> {
        self.templates
            .iter()
            .map(|(style, t)| (style.file_name().to_string(), t.hash()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub style: PromptStyle,
    pub target_sentences: usize,
    /// Must equal the truncated table size.
    pub target_features: usize,
}

impl GenerationSpec {
    pub fn new(style: PromptStyle, target_features: usize) -> Self {
        GenerationSpec {
            style,
            target_sentences: 10,
            target_features,
        }
    }

    /// Content and format rules substituted for `{rules}`.
    pub fn rules_block(&self) -> String {
        let rules = [
            "Content rules:".to_string(),
            "- Emphasize to the reader the rank (in absolute value) and the sign of every feature you discuss.".to_string(),
            "- Insert a short suggestion as to why each feature could have contributed in this way.".to_string(),
            "Format rules:".to_string(),
            "- Do not use tables or lists; present the narrative as one coherent story.".to_string(),
            format!("- Aim at a narrative of {} sentences.", self.target_sentences),
            format!(
                "- Only involve the {} most important features (by absolute SHAP value), which are exactly the features in the table.",
                self.target_features
            ),
        ];
        rules.join("\n")
    }
}

pub fn render_scores(table: &TruncatedTable) -> String {
    format!(
        "The model predicts a probability of {:.3} for class 1. The average prediction (base value) for class 1 is {:.3}.",
        table.class1_score, table.base_score
    )
}

/// A rendered prompt plus the hash identifying the template text it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub text: String,
    pub template_hash: String,
}

pub fn build_generation_prompt(
    templates: &TemplateSet,
    table: &TruncatedTable,
    spec: &GenerationSpec,
    dataset_description: &str,
) -> Result<RenderedPrompt> {
    if spec.target_features != table.n() {
        return Err(Error::Config(format!(
            "generation targets {} features but the truncated table has {}",
            spec.target_features,
            table.n()
        )));
    }
    let template = templates.get(spec.style.template())?;
    let rules = spec.rules_block();
    let mut values = BTreeMap::new();
    values.insert("dataset_description", dataset_description.trim().to_string());
    values.insert("feature_table", render_table_block(table));
    values.insert("scores", render_scores(table));
    values.insert("rules", rules.clone());
    let text = template.render(&values)?;
    let mut hasher = Sha256::new();
    hasher.update(template.body.as_bytes());
    if template.placeholders().contains(&"rules") {
        hasher.update(rules.as_bytes());
    }
    Ok(RenderedPrompt {
        text,
        template_hash: hex::encode(hasher.finalize()),
    })
}

/// Backslash-escapes braces (and backslashes) so narrative text cannot be read
/// as part of the JSON format instruction.
pub fn escape_braces(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if matches!(c, '\\' | '{' | '}') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

pub fn unescape_braces(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(next) = chars.next() {
                out.push(next);
                continue;
            }
        }
        out.push(c);
    }
    out
}

pub fn build_extraction_prompt(
    templates: &TemplateSet,
    narrative: &str,
    feature_set: &[String],
) -> Result<RenderedPrompt> {
    if narrative.trim().is_empty() {
        return Err(Error::Input(
            "cannot build an extraction prompt for an empty narrative".into(),
        ));
    }
    if feature_set.is_empty() {
        return Err(Error::Input("extraction needs a non-empty feature set".into()));
    }
    let template = templates.get(TemplateStyle::Extraction)?;
    let mut values = BTreeMap::new();
    values.insert(
        "feature_set",
        feature_set
            .iter()
            .map(|f| format!("- {f}"))
            .collect::<Vec<_>>()
            .join("\n"),
    );
    values.insert("narrative", escape_braces(narrative));
    Ok(RenderedPrompt {
        text: template.render(&values)?,
        template_hash: template.hash(),
    })
}

/// Recovers the narrative embedded in an extraction prompt, if the prompt has one.
pub fn narrative_from_extraction_prompt(prompt: &str) -> Option<String> {
    let start = prompt.rfind(NARRATIVE_OPEN)? + NARRATIVE_OPEN.len();
    let end = start + prompt[start..].rfind(NARRATIVE_CLOSE)?;
    Some(unescape_braces(prompt[start..end].trim_matches('\n')))
}
