//! On-disk cohort store: one JSON record per subject, a labels file and a manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::RowDiagnostic;
use crate::model::{format_timestamp, parse_timestamp, PatientRecord, PredictionInstance, Timestamp};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
const RECORDS_DIR: &str = "records";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub labels: Vec<PredictionInstance>,
}

impl Cohort {
    pub fn record(&self, subject_id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.subject_id == subject_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub file: String,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subject_count: usize,
    pub event_count: usize,
    pub time_range: Option<(Timestamp, Timestamp)>,
    pub content_hash: String,
    pub subjects: Vec<SubjectEntry>,
}

fn file_name_for(subject_id: &str) -> String {
    let safe = !subject_id.is_empty()
        && subject_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if safe {
        format!("{subject_id}.json")
    } else {
        let hex: String = subject_id.bytes().map(|b| format!("{b:02x}")).collect();
        format!("x{hex}.json")
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write `cohort` under `dir`. Returns the manifest that was written.
pub fn write_store(dir: &Path, cohort: &Cohort, diagnostics: &[RowDiagnostic]) -> Result<Manifest> {
    let records_dir = dir.join(RECORDS_DIR);
    fs::create_dir_all(&records_dir).map_err(|e| Error::io(&records_dir, e))?;

    let mut seen = HashSet::new();
    let mut hasher = Sha256::new();
    let mut subjects = Vec::with_capacity(cohort.records.len());
    let mut range: Option<(Timestamp, Timestamp)> = None;
    for record in &cohort.records {
        if !seen.insert(record.subject_id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate subject_id {:?} in cohort",
                record.subject_id
            )));
        }
        let file = file_name_for(&record.subject_id);
        let bytes = serde_json::to_vec(record).map_err(|e| Error::Data(e.to_string()))?;
        hasher.update(file.as_bytes());
        hasher.update(&bytes);
        write_file(&records_dir.join(&file), &bytes)?;
        if let (Some(first), Some(last)) = (record.first_timestamp(), record.last_timestamp()) {
            range = Some(match range {
                None => (first, last),
                Some((lo, hi)) => (lo.min(first), hi.max(last)),
            });
        }
        subjects.push(SubjectEntry {
            subject_id: record.subject_id.clone(),
            file,
            events: record.events.len(),
        });
    }

    let labels = labels_to_csv(&cohort.labels)?;
    hasher.update(&labels);
    write_file(&dir.join(LABELS_FILE), &labels)?;

    let mut diag = String::new();
    for d in diagnostics {
        diag.push_str(&serde_json::to_string(d).map_err(|e| Error::Data(e.to_string()))?);
        diag.push('\n');
    }
    write_file(&dir.join(DIAGNOSTICS_FILE), diag.as_bytes())?;

    let manifest = Manifest {
        subject_count: subjects.len(),
        event_count: subjects.iter().map(|s| s.events).sum(),
        time_range: range,
        content_hash: hasher.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        subjects,
    };
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    write_file(&dir.join(MANIFEST_FILE), &bytes)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load_store(dir: &Path) -> Result<Cohort> {
    let manifest = read_manifest(dir)?;
    let mut records = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let path = dir.join(RECORDS_DIR).join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let record: PatientRecord = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if !record.is_sorted() {
            return Err(Error::Data(format!("{}: events not sorted", path.display())));
        }
        records.push(record);
    }
    let labels_path = dir.join(LABELS_FILE);
    let labels = if labels_path.exists() {
        read_labels(&labels_path)?
    } else {
        Vec::new()
    };
    Ok(Cohort { records, labels })
}

fn labels_to_csv(labels: &[PredictionInstance]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subject_id", "prediction_time", "label"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for l in labels {
        let label = l.true_label.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            l.subject_id.as_str(),
            format_timestamp(&l.prediction_time).as_str(),
            label.as_str(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

pub fn write_labels(path: &Path, labels: &[PredictionInstance]) -> Result<()> {
    write_file(path, &labels_to_csv(labels)?)
}

/// Labels file: `subject_id,prediction_time,label` (label may be blank).
pub fn read_labels(path: &Path) -> Result<Vec<PredictionInstance>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| {
            Error::Schema(format!("{}: missing column {name:?}", path.display()))
        })
    };
    let (subject, time, label) = (col("subject_id")?, col("prediction_time")?, col("label")?);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("{} row {row}: {e}", path.display())))?;
        let ts = rec.get(time).unwrap_or("");
        let prediction_time = parse_timestamp(ts).ok_or_else(|| {
            Error::Data(format!("{} row {row}: bad prediction_time {ts:?}", path.display()))
        })?;
        let raw_label = rec.get(label).unwrap_or("").trim();
        let true_label = if raw_label.is_empty() {
            None
        } else {
            Some(raw_label.parse::<i64>().map_err(|_| {
                Error::Data(format!("{} row {row}: bad label {raw_label:?}", path.display()))
            })?)
        };
        out.push(PredictionInstance {
            subject_id: rec.get(subject).unwrap_or("").trim().to_string(),
            prediction_time,
            true_label,
        });
    }
    Ok(out)
}

/// Default output locations inside a store directory.
pub fn labels_path(dir: &Path) -> PathBuf {
    dir.join(LABELS_FILE)
}
