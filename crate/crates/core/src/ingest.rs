//! MEDS-style event ingestion, concept resolution and event serialization.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    format_timestamp, validate_raw_record, ClinicalEvent, EventType, EventValue, PatientRecord,
    RawEvent,
};

/// Description used when an event's code is blank.
pub const UNKNOWN_DESCRIPTION: &str = "unknown";

/// Concept code to natural-language description.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OntologyMap {
    pub entries: HashMap<String, String>,
}

impl OntologyMap {
    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            entries: pairs
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        }
    }

    /// Two-column delimited file `code,description` with a header row.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let mut entries = HashMap::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::Schema(format!("{} row {}: {e}", path.display(), i + 2)))?;
            let code = row.get(0).unwrap_or("").trim();
            let desc = row.get(1).unwrap_or("").trim();
            if code.is_empty() {
                continue;
            }
            if entries.insert(code.to_string(), desc.to_string()).is_some() {
                return Err(Error::Schema(format!(
                    "{}: duplicate ontology code {code:?}",
                    path.display()
                )));
            }
        }
        Ok(Self { entries })
    }
}

/// Result of resolving a concept code. `flagged` marks a degenerate (blank) code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolved {
    pub description: String,
    pub flagged: bool,
}

/// Map a code to its description, falling back to the code itself.
pub fn resolve_concept(code: &str, ontology: &OntologyMap) -> Resolved {
    if code.trim().is_empty() {
        return Resolved {
            description: String::new(),
            flagged: true,
        };
    }
    let description = ontology
        .entries
        .get(code)
        .filter(|d| !d.trim().is_empty())
        .cloned()
        .unwrap_or_else(|| code.to_string());
    Resolved {
        description,
        flagged: false,
    }
}

/// Render a numeric value with at most 6 significant digits and no trailing zeros.
pub fn format_numeric(value: f64) -> String {
    if value == 0.0 || !value.is_finite() {
        return if value.is_finite() { "0".into() } else { value.to_string() };
    }
    let magnitude = value.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let mut s = if magnitude > 5 {
        let scale = 10f64.powi(magnitude - 5);
        format!("{:.0}", (value / scale).round() * scale)
    } else {
        format!("{value:.decimals$}")
    };
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// `[time] type - description (value: value)`; the value suffix is omitted when absent.
pub fn serialize_event(event: &ClinicalEvent) -> String {
    let description = if event.description.trim().is_empty() {
        UNKNOWN_DESCRIPTION
    } else {
        event.description.as_str()
    };
    let mut line = format!(
        "[{}] {} - {}",
        format_timestamp(&event.timestamp),
        event.event_type,
        description
    );
    match &event.value {
        Some(EventValue::Numeric { value, unit }) => {
            line.push_str(" (value: ");
            line.push_str(&format_numeric(*value));
            if let Some(u) = unit.as_deref().filter(|u| !u.trim().is_empty()) {
                line.push(' ');
                line.push_str(u.trim());
            }
            line.push(')');
        }
        Some(EventValue::Text { text }) => {
            line.push_str(" (value: ");
            line.push_str(text);
            line.push(')');
        }
        None => {}
    }
    line
}

/// Column names in the event file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub subject_id: String,
    pub time: String,
    pub code: String,
    pub event_type: String,
    pub numeric_value: String,
    pub unit: String,
    pub text_value: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            subject_id: "subject_id".into(),
            time: "time".into(),
            code: "code".into(),
            event_type: "event_type".into(),
            numeric_value: "numeric_value".into(),
            unit: "unit".into(),
            text_value: "text_value".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CohortSource {
    pub events_path: PathBuf,
    pub ontology_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub schema: ColumnMap,
}

impl CohortSource {
    pub fn new(events_path: impl Into<PathBuf>) -> Self {
        Self {
            events_path: events_path.into(),
            ontology_path: None,
            labels_path: None,
            schema: ColumnMap::default(),
        }
    }

    pub fn check_paths(&self) -> Result<()> {
        let paths = std::iter::once(&self.events_path)
            .chain(self.ontology_path.iter())
            .chain(self.labels_path.iter());
        for p in paths {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowDiagnostic {
    /// 1-based line number in the source file, header included.
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedCohort {
    pub records: Vec<PatientRecord>,
    pub rejected: Vec<RowDiagnostic>,
    /// Accepted rows whose code was blank.
    pub warnings: Vec<RowDiagnostic>,
    pub data_rows: usize,
}

impl ParsedCohort {
    pub fn event_count(&self) -> usize {
        self.records.iter().map(|r| r.events.len()).sum()
    }
}

#[derive(Debug, Default)]
struct RowFields {
    subject_id: String,
    time: String,
    code: String,
    event_type: Option<String>,
    numeric_value: Option<String>,
    unit: Option<String>,
    text_value: Option<String>,
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.filter(|v| !v.trim().is_empty())
}

fn row_to_event(
    fields: RowFields,
    ontology: &OntologyMap,
) -> std::result::Result<(String, RawEvent, bool), String> {
    if fields.subject_id.trim().is_empty() {
        return Err("empty subject_id".into());
    }
    let numeric = match non_empty(fields.numeric_value) {
        Some(raw) => {
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| format!("non-numeric value {raw:?} in numeric column"))?;
            if !v.is_finite() {
                return Err(format!("non-finite numeric value {raw:?}"));
            }
            Some(v)
        }
        None => None,
    };
    let value = match (numeric, non_empty(fields.text_value)) {
        (Some(value), _) => Some(EventValue::Numeric {
            value,
            unit: non_empty(fields.unit).map(|u| u.trim().to_string()),
        }),
        (None, Some(text)) => Some(EventValue::Text { text }),
        (None, None) => None,
    };
    let event_type = match non_empty(fields.event_type) {
        Some(t) => t.parse::<EventType>().unwrap_or(EventType::Other),
        None if numeric.is_some() => EventType::Measurement,
        None => EventType::Other,
    };
    let resolved = resolve_concept(fields.code.trim(), ontology);
    let description = if resolved.flagged {
        UNKNOWN_DESCRIPTION.to_string()
    } else {
        resolved.description
    };
    if crate::model::parse_timestamp(&fields.time).is_none() {
        return Err(format!("unparseable timestamp {:?}", fields.time));
    }
    Ok((
        fields.subject_id.trim().to_string(),
        RawEvent {
            concept_code: fields.code.trim().to_string(),
            event_type,
            description,
            value,
            timestamp: fields.time,
        },
        resolved.flagged,
    ))
}

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl" | "ndjson")
    )
}

/// Parse an event file (delimited text, or `.jsonl`/`.ndjson` records) into validated
/// per-subject records. Malformed rows are collected as diagnostics.
pub fn parse_events(source: &CohortSource) -> Result<ParsedCohort> {
    source.check_paths()?;
    let ontology = match &source.ontology_path {
        Some(p) => OntologyMap::load(p)?,
        None => OntologyMap::default(),
    };
    let rows = if is_jsonl(&source.events_path) {
        read_jsonl_rows(&source.events_path, &source.schema)?
    } else {
        read_csv_rows(&source.events_path, &source.schema)?
    };

    let mut out = ParsedCohort::default();
    // BTreeMap keeps subject order stable; each subject keeps file order for ties.
    let mut by_subject: BTreeMap<String, Vec<RawEvent>> = BTreeMap::new();
    for (row, fields) in rows {
        out.data_rows += 1;
        let fields = match fields {
            Ok(f) => f,
            Err(reason) => {
                out.rejected.push(RowDiagnostic { row, reason });
                continue;
            }
        };
        match row_to_event(fields, &ontology) {
            Ok((subject, raw, flagged)) => {
                if flagged {
                    out.warnings.push(RowDiagnostic {
                        row,
                        reason: "empty concept code".into(),
                    });
                }
                by_subject.entry(subject).or_default().push(raw);
            }
            Err(reason) => out.rejected.push(RowDiagnostic { row, reason }),
        }
    }
    for (subject, raw) in by_subject {
        out.records.push(validate_raw_record(&subject, raw)?);
    }
    Ok(out)
}

type Row = (usize, std::result::Result<RowFields, String>);

fn read_csv_rows(path: &Path, schema: &ColumnMap) -> Result<Vec<Row>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let required = |name: &str| {
        col(name).ok_or_else(|| {
            Error::Schema(format!(
                "{}: missing required column {name:?}",
                path.display()
            ))
        })
    };
    let subject = required(&schema.subject_id)?;
    let time = required(&schema.time)?;
    let code = required(&schema.code)?;
    let event_type = col(&schema.event_type);
    let numeric = col(&schema.numeric_value);
    let unit = col(&schema.unit);
    let text = col(&schema.text_value);

    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let fields = rec.map_err(|e| e.to_string()).and_then(|r| {
            let get = |idx: usize| r.get(idx).map(str::to_string);
            if r.len() < headers.len() {
                return Err(format!("expected {} fields, found {}", headers.len(), r.len()));
            }
            Ok(RowFields {
                subject_id: get(subject).unwrap_or_default(),
                time: get(time).unwrap_or_default(),
                code: get(code).unwrap_or_default(),
                event_type: event_type.and_then(get),
                numeric_value: numeric.and_then(get),
                unit: unit.and_then(get),
                text_value: text.and_then(get),
            })
        });
        rows.push((line, fields));
    }
    Ok(rows)
}

fn json_field(obj: &serde_json::Map<String, serde_json::Value>, key: &str) -> Option<String> {
    match obj.get(key)? {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

fn read_jsonl_rows(path: &Path, schema: &ColumnMap) -> Result<Vec<Row>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut schema_checked = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<serde_json::Map<String, serde_json::Value>, _> =
            serde_json::from_str(&line);
        let fields = match parsed {
            Ok(obj) => {
                if !schema_checked {
                    for name in [&schema.subject_id, &schema.time, &schema.code] {
                        if !obj.contains_key(name.as_str()) {
                            return Err(Error::Schema(format!(
                                "{}: missing required field {name:?}",
                                path.display()
                            )));
                        }
                    }
                    schema_checked = true;
                }
                Ok(RowFields {
                    subject_id: json_field(&obj, &schema.subject_id).unwrap_or_default(),
                    time: json_field(&obj, &schema.time).unwrap_or_default(),
                    code: json_field(&obj, &schema.code).unwrap_or_default(),
                    event_type: json_field(&obj, &schema.event_type),
                    numeric_value: json_field(&obj, &schema.numeric_value),
                    unit: json_field(&obj, &schema.unit),
                    text_value: json_field(&obj, &schema.text_value),
                })
            }
            Err(e) => Err(format!("malformed record: {e}")),
        };
        rows.push((i + 1, fields));
    }
    Ok(rows)
}
