//! Clinical events, patient records and the prediction-time history cutoff.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Timestamp = DateTime<Utc>;

/// Format used when rendering timestamps into prompts and serialized lines.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Parse `YYYY-MM-DD HH:MM:SS`, `YYYY-MM-DD HH:MM`, a bare date, or ISO-8601 / RFC 3339.
/// Strings without an offset are taken as UTC.
pub fn parse_timestamp(raw: &str) -> Option<Timestamp> {
    let s = raw.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    const NAIVE: [&str; 6] = [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
    ];
    for fmt in NAIVE {
        if let Ok(n) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(n.and_utc());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|n| n.and_utc())
}

pub fn format_timestamp(ts: &Timestamp) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

/// Fractional days between two instants (`later - earlier`), millisecond resolution.
pub fn days_between(earlier: &Timestamp, later: &Timestamp) -> f64 {
    (*later - *earlier).num_milliseconds() as f64 / 86_400_000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Diagnosis,
    Procedure,
    Measurement,
    Medication,
    Note,
    Visit,
    Other,
}

impl EventType {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventType::Diagnosis => "diagnosis",
            EventType::Procedure => "procedure",
            EventType::Measurement => "measurement",
            EventType::Medication => "medication",
            EventType::Note => "note",
            EventType::Visit => "visit",
            EventType::Other => "other",
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "diagnosis" | "condition" => EventType::Diagnosis,
            "procedure" => EventType::Procedure,
            "measurement" | "lab" | "vital" => EventType::Measurement,
            "medication" | "drug" => EventType::Medication,
            "note" => EventType::Note,
            "visit" | "encounter" => EventType::Visit,
            "other" | "" => EventType::Other,
            other => return Err(Error::Validation(format!("unknown event type {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventValue {
    Numeric {
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        unit: Option<String>,
    },
    Text {
        text: String,
    },
}

/// One timestamped clinical fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub concept_code: String,
    pub event_type: EventType,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<EventValue>,
    pub timestamp: Timestamp,
}

impl ClinicalEvent {
    pub fn numeric_value(&self) -> Option<(f64, Option<&str>)> {
        match &self.value {
            Some(EventValue::Numeric { value, unit }) => Some((*value, unit.as_deref())),
            _ => None,
        }
    }

    /// Events carrying a numeric value go to the indicator path; everything else is textual.
    pub fn is_numeric(&self) -> bool {
        matches!(self.value, Some(EventValue::Numeric { .. }))
    }
}

/// A chronologically ordered event sequence for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub subject_id: String,
    pub events: Vec<ClinicalEvent>,
}

impl PatientRecord {
    pub fn new(subject_id: impl Into<String>, events: Vec<ClinicalEvent>) -> Self {
        Self {
            subject_id: subject_id.into(),
            events,
        }
    }

    pub fn is_sorted(&self) -> bool {
        self.events
            .windows(2)
            .all(|w| w[0].timestamp <= w[1].timestamp)
    }

    pub fn first_timestamp(&self) -> Option<Timestamp> {
        self.events.first().map(|e| e.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<Timestamp> {
        self.events.last().map(|e| e.timestamp)
    }
}

/// Sort a record's events by timestamp. Equal timestamps keep their input order.
pub fn validate_record(mut record: PatientRecord) -> Result<PatientRecord> {
    if record.events.is_empty() {
        return Err(Error::Validation(format!(
            "record for subject {:?} has no events",
            record.subject_id
        )));
    }
    for (i, e) in record.events.iter().enumerate() {
        if let Some((v, _)) = e.numeric_value() {
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "event {i} of subject {:?} has non-finite value",
                    record.subject_id
                )));
            }
        }
    }
    // slice::sort_by_key is stable
    record.events.sort_by_key(|e| e.timestamp);
    Ok(record)
}

/// An event whose timestamp has not been parsed yet.
#[derive(Debug, Clone)]
pub struct RawEvent {
    pub concept_code: String,
    pub event_type: EventType,
    pub description: String,
    pub value: Option<EventValue>,
    pub timestamp: String,
}

/// Parse timestamps and validate. Errors name the offending event index.
pub fn validate_raw_record(subject_id: &str, raw: Vec<RawEvent>) -> Result<PatientRecord> {
    let mut events = Vec::with_capacity(raw.len());
    for (index, r) in raw.into_iter().enumerate() {
        let timestamp = parse_timestamp(&r.timestamp).ok_or_else(|| Error::Timestamp {
            index,
            value: r.timestamp.clone(),
        })?;
        events.push(ClinicalEvent {
            concept_code: r.concept_code,
            event_type: r.event_type,
            description: r.description,
            value: r.value,
            timestamp,
        });
    }
    validate_record(PatientRecord::new(subject_id, events))
}

/// Events with timestamp at or before `cutoff`, in record order.
pub fn history_before(record: &PatientRecord, cutoff: Timestamp) -> &[ClinicalEvent] {
    // events are sorted, so the visible history is a prefix
    let end = record.events.partition_point(|e| e.timestamp <= cutoff);
    &record.events[..end]
}

/// One prediction query: a subject, the prediction time and optionally the true label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionInstance {
    pub subject_id: String,
    pub prediction_time: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<i64>,
}
