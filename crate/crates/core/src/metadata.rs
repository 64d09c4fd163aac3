//! Four-field concept records: parsing raw model responses, schema
//! enforcement and normalization, and the on-disk metadata map.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const MAX_ATTRIBUTES: usize = 16;
pub const PLACEHOLDER: &str = "unknown";
pub const CAPTION_WORDS: std::ops::RangeInclusive<usize> = 24..=30;
pub const RESPONSE_FILE: &str = "response.txt";

/// Parts whose descriptors are verbatim text and keep their casing.
const VERBATIM_PARTS: [&str; 2] = ["wordmark", "logo"];

#[derive(Debug, Error)]
pub enum MetadataError {
    #[error("no well-formed JSON object in response")]
    NoObject,
    #[error("metadata file is malformed: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type RawRecord = Map<String, Value>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub concept: String,
    pub category: String,
    pub caption: String,
    pub fingerprint_attributes: Vec<String>,
}

impl ConceptRecord {
    pub fn placeholder(concept_hint: &str) -> Self {
        normalize_record(&RawRecord::new(), concept_hint).0
    }

    /// Back to a raw map, e.g. to re-run normalization.
    pub fn to_raw(&self) -> RawRecord {
        match serde_json::to_value(self).expect("record serializes") {
            Value::Object(m) => m,
            _ => unreachable!("records serialize as objects"),
        }
    }

    /// Text prefix that is prefilled into the concept's external cache.
    pub fn linearize(&self) -> String {
        let mut s = format!(
            "concept: {}\ncategory: {}\ncaption: {}\nattributes:\n",
            self.concept, self.category, self.caption
        );
        for a in &self.fingerprint_attributes {
            s.push_str("- ");
            s.push_str(a);
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Repair {
    pub field: String,
    pub rule: String,
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub repairs: Vec<Repair>,
    pub warnings: Vec<String>,
    pub fatal: Option<String>,
}

impl ValidationReport {
    fn repair(
        &mut self,
        field: &str,
        rule: &str,
        before: impl Into<String>,
        after: impl Into<String>,
    ) {
        self.repairs.push(Repair {
            field: field.into(),
            rule: rule.into(),
            before: before.into(),
            after: after.into(),
        });
    }
}

/// Extracts the outermost well-formed JSON object from a model response,
/// ignoring code fences and surrounding prose.
pub fn parse_model_response(text: &str) -> Result<RawRecord, MetadataError> {
    let fence = Regex::new(r"```[A-Za-z0-9_-]*").expect("static regex");
    let cleaned = fence.replace_all(text, " ");
    for (start, _) in cleaned.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&cleaned[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Ok(map);
        }
    }
    Err(MetadataError::NoObject)
}

fn split_part(entry: &str) -> Option<(&str, &str)> {
    entry.split_once(": ")
}

fn is_verbatim(entry: &str) -> bool {
    let body = entry.strip_prefix("often: ").unwrap_or(entry);
    split_part(body).is_some_and(|(part, _)| {
        VERBATIM_PARTS
            .iter()
            .any(|p| part.trim().eq_ignore_ascii_case(p))
    })
}

/// Lowercases an attribute, keeping the descriptor of wordmark/logo entries.
fn case_attribute(entry: &str) -> String {
    if is_verbatim(entry) {
        let (part, descriptor) = entry
            .rsplit_once(": ")
            .expect("verbatim entries have a part");
        format!("{}: {}", part.to_lowercase(), descriptor)
    } else {
        entry.to_lowercase()
    }
}

fn verbatim_descriptors(attributes: &[String]) -> Vec<&str> {
    attributes
        .iter()
        .filter(|a| is_verbatim(a))
        .filter_map(|a| a.rsplit_once(": ").map(|(_, d)| d))
        .filter(|d| !d.is_empty())
        .collect()
}

/// Lowercases free text, restoring the casing of known wordmark runs.
fn case_text(text: &str, verbatim: &[&str]) -> String {
    let mut out = text.to_lowercase();
    for run in verbatim {
        let lowered = run.to_lowercase();
        if lowered.len() == run.len() {
            out = out.replace(&lowered, run);
        }
    }
    out
}

pub fn caption_word_count(caption: &str) -> usize {
    caption.split_whitespace().count()
}

fn text_field(raw: &RawRecord, key: &str, report: &mut ValidationReport) -> Option<String> {
    match raw.get(key) {
        Some(Value::String(s)) if !s.trim().is_empty() => {
            let trimmed = s.trim();
            if trimmed != s {
                report.repair(key, "trim", s.as_str(), trimmed);
            }
            Some(trimmed.to_string())
        }
        Some(other) => {
            report.repair(key, "invalid-value", other.to_string(), "");
            None
        }
        None => None,
    }
}

fn raw_attributes(raw: &RawRecord, report: &mut ValidationReport) -> Vec<String> {
    const KEY: &str = "fingerprint_attributes";
    let items = match raw.get(KEY) {
        Some(Value::Array(items)) => items.clone(),
        Some(Value::String(s)) => {
            report.repair(KEY, "coerce-list", s.as_str(), format!("[{s:?}]"));
            vec![Value::String(s.clone())]
        }
        Some(other) => {
            report.repair(KEY, "invalid-value", other.to_string(), "[]");
            Vec::new()
        }
        None => Vec::new(),
    };
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        match item {
            Value::String(s) if !s.trim().is_empty() => {
                let trimmed = s.trim();
                if trimmed != s {
                    report.repair(KEY, "trim", s.as_str(), trimmed);
                }
                out.push(trimmed.to_string());
            }
            other => report.repair(KEY, "drop-invalid", other.to_string(), ""),
        }
    }
    out
}

/// Enforces the four-field schema and the normalization rules. Always
/// succeeds; `concept_hint` (the source folder name) fills a missing name.
pub fn normalize_record(raw: &RawRecord, concept_hint: &str) -> (ConceptRecord, ValidationReport) {
    let mut report = ValidationReport::default();
    const FIELDS: [&str; 4] = ["concept", "category", "caption", "fingerprint_attributes"];
    for key in raw.keys().filter(|k| !FIELDS.contains(&k.as_str())) {
        report.repair(key, "drop-extra", raw[key].to_string(), "");
    }

    // Attributes first: their wordmark runs decide caption casing.
    let mut attributes = Vec::new();
    for entry in raw_attributes(raw, &mut report) {
        let cased = case_attribute(&entry);
        if cased != entry {
            report.repair("fingerprint_attributes", "lowercase", entry, cased.as_str());
        }
        if attributes.contains(&cased) {
            report.repair("fingerprint_attributes", "dedupe", cased, "");
        } else {
            attributes.push(cased);
        }
    }
    if attributes.len() > MAX_ATTRIBUTES {
        for dropped in attributes.drain(MAX_ATTRIBUTES..) {
            report.repair("fingerprint_attributes", "cap", dropped, "");
        }
    }
    if attributes.is_empty() {
        report.repair("fingerprint_attributes", "placeholder", "[]", PLACEHOLDER);
        attributes.push(PLACEHOLDER.to_string());
    }
    let verbatim = verbatim_descriptors(&attributes);

    let mut field = |key: &str, default: &str| {
        let value = text_field(raw, key, &mut report).unwrap_or_else(|| {
            report.repair(key, "default", "", default);
            default.to_string()
        });
        let cased = case_text(&value, &verbatim);
        if cased != value {
            report.repair(key, "lowercase", value, cased.as_str());
        }
        cased
    };
    let concept = field("concept", concept_hint);
    let category = field("category", PLACEHOLDER);
    let caption = field("caption", PLACEHOLDER);

    let words = caption_word_count(&caption);
    if !CAPTION_WORDS.contains(&words) {
        report.warnings.push(format!(
            "caption has {words} words, expected {}-{}",
            CAPTION_WORDS.start(),
            CAPTION_WORDS.end()
        ));
    }

    let record = ConceptRecord {
        concept,
        category,
        caption,
        fingerprint_attributes: attributes,
    };
    (record, report)
}

/// Splits every attribute at its first `": "`; entries without the
/// separator come back as `(entry, "")` with a warning.
pub fn attribute_parts(record: &ConceptRecord) -> (Vec<(String, String)>, Vec<String>) {
    let mut warnings = Vec::new();
    let parts = record
        .fingerprint_attributes
        .iter()
        .map(|a| match split_part(a) {
            Some((part, descriptor)) => (part.to_string(), descriptor.to_string()),
            None => {
                warnings.push(format!(
                    "attribute {a:?} has no \"part: descriptor\" separator"
                ));
                (a.clone(), String::new())
            }
        })
        .collect();
    (parts, warnings)
}

/// Serializes the concept map as indented UTF-8 JSON (non-ASCII kept as is).
pub fn to_metadata_json(records: &BTreeMap<String, ConceptRecord>) -> String {
    let mut s = serde_json::to_string_pretty(records).expect("records serialize");
    s.push('\n');
    s
}

pub fn from_metadata_json(text: &str) -> Result<BTreeMap<String, ConceptRecord>, MetadataError> {
    Ok(serde_json::from_str(text)?)
}

pub fn load_metadata(path: &Path) -> Result<BTreeMap<String, ConceptRecord>, MetadataError> {
    let text = fs::read_to_string(path).map_err(|source| MetadataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_metadata_json(&text)
}

/// Where raw model responses come from. A live API client would implement
/// this; the shipped implementation reads files.
pub trait ResponseSource {
    fn concept_ids(&self) -> Result<Vec<String>, MetadataError>;
    fn response(&self, concept_id: &str) -> Result<String, MetadataError>;
}

/// Responses stored as `<root>/<concept_id>/response.txt`.
pub struct FileResponses {
    root: PathBuf,
}

impl FileResponses {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl ResponseSource for FileResponses {
    fn concept_ids(&self) -> Result<Vec<String>, MetadataError> {
        let io = |source| MetadataError::Io {
            path: self.root.clone(),
            source,
        };
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io)? {
            let entry = entry.map_err(io)?;
            if entry.path().join(RESPONSE_FILE).is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn response(&self, concept_id: &str) -> Result<String, MetadataError> {
        let path = self.root.join(concept_id).join(RESPONSE_FILE);
        fs::read_to_string(&path).map_err(|source| MetadataError::Io { path, source })
    }
}

/// Result of ingesting one concept's response.
#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub concept_id: String,
    pub record: ConceptRecord,
    pub report: ValidationReport,
    pub parse_error: Option<String>,
}

/// Parses and normalizes every response; unparseable responses yield a
/// placeholder record and a logged parse error.
pub fn ingest(source: &dyn ResponseSource) -> Result<Vec<IngestOutcome>, MetadataError> {
    source
        .concept_ids()?
        .into_iter()
        .map(|id| {
            let text = source.response(&id)?;
            let (raw, parse_error) = match parse_model_response(&text) {
                Ok(raw) => (raw, None),
                Err(e) => (RawRecord::new(), Some(e.to_string())),
            };
            let (record, mut report) = normalize_record(&raw, &id);
            if let Some(e) = &parse_error {
                report.warnings.insert(0, format!("parse error: {e}"));
            }
            Ok(IngestOutcome {
                concept_id: id,
                record,
                report,
                parse_error,
            })
        })
        .collect()
}
