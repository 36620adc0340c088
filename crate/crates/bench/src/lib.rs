//! Fixtures shared by the criterion benches.

use chrono::Duration;
use ehrrag_core::model::parse_timestamp;
use ehrrag_core::{ClinicalEvent, EventType, EventValue, PatientRecord, Timestamp};

const WORDS: [&str; 12] = [
    "hypertension", "follow-up", "chest", "pain", "metformin", "discharge", "renal", "cough",
    "imaging", "fever", "fatigue", "edema",
];

/// A single-subject record with `n` events, one every six hours, about a third numeric.
pub fn long_record(n: usize) -> PatientRecord {
    let base = start();
    let events = (0..n)
        .map(|i| {
            let numeric = i % 3 == 0;
            ClinicalEvent {
                concept_code: format!("C{}", i % 97),
                event_type: if numeric { EventType::Measurement } else { EventType::Diagnosis },
                description: if numeric {
                    format!("lab panel {}", i % 13)
                } else {
                    format!("{} {} {}", WORDS[i % 12], WORDS[(i / 12) % 12], i % 41)
                },
                value: numeric.then(|| EventValue::Numeric {
                    value: (i % 50) as f64 * 0.7,
                    unit: Some("mg/dL".into()),
                }),
                timestamp: base + Duration::hours(6 * i as i64),
            }
        })
        .collect();
    PatientRecord::new("BENCH0001", events)
}

pub fn start() -> Timestamp {
    parse_timestamp("2012-01-01 00:00:00").expect("valid literal")
}
