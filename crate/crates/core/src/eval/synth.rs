//! Synthetic long-horizon cohorts with one planted decisive event per patient.

use std::path::Path;

use chrono::Duration;
use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{ScriptRule, ScriptedResponder, TemplateId};
use crate::model::{parse_timestamp, ClinicalEvent, EventType, EventValue, PatientRecord, PredictionInstance};
use crate::store::{write_store, Cohort, Manifest};
use crate::tasks::TaskSpec;

pub const PLANTED_CODE: &str = "SYN/PLANTED";
/// Task id of the built-in task matching [`planted_scenario`].
pub const SYNTHETIC_TASK_ID: &str = "synthetic_marker";

/// Where on the timeline a planted event lands, as a fraction of the span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Early,
    Mid,
    Recent,
}

impl Band {
    /// Half-open fraction range `[lo, hi)` of the span.
    pub fn range(&self) -> (f64, f64) {
        match self {
            Band::Early => (0.0, 0.05),
            Band::Mid => (0.475, 0.525),
            Band::Recent => (0.95, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedRule {
    pub token: String,
    pub position: Band,
    pub label: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConcept {
    pub event_type: EventType,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericConcept {
    pub name: String,
    #[serde(default)]
    pub unit: Option<String>,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCohortSpec {
    pub n_patients: usize,
    /// Noise events per patient; the planted event comes on top.
    pub events_per_patient: usize,
    pub time_span_days: u32,
    pub start: String,
    pub planted_rules: Vec<PlantedRule>,
    pub noise_vocabulary: Vec<NoiseConcept>,
    pub numeric_vocabulary: Vec<NumericConcept>,
    pub numeric_fraction: f64,
    pub seed: u64,
}

fn noise(event_type: EventType, description: &str) -> NoiseConcept {
    NoiseConcept {
        event_type,
        description: description.into(),
    }
}

fn lab(name: &str, unit: &str, low: f64, high: f64) -> NumericConcept {
    NumericConcept {
        name: name.into(),
        unit: Some(unit.into()),
        low,
        high,
    }
}

pub fn default_noise_vocabulary() -> Vec<NoiseConcept> {
    use EventType::*;
    vec![
        noise(Diagnosis, "Essential hypertension"),
        noise(Diagnosis, "Type 2 diabetes mellitus without complications"),
        noise(Diagnosis, "Hyperlipidemia"),
        noise(Diagnosis, "Gastroesophageal reflux disease"),
        noise(Diagnosis, "Osteoarthritis of knee"),
        noise(Diagnosis, "Chronic obstructive pulmonary disease"),
        noise(Diagnosis, "Major depressive disorder, single episode"),
        noise(Diagnosis, "Hypothyroidism"),
        noise(Procedure, "Electrocardiogram"),
        noise(Procedure, "Chest radiograph, two views"),
        noise(Procedure, "Colonoscopy with biopsy"),
        noise(Procedure, "Influenza vaccination"),
        noise(Procedure, "Echocardiography transthoracic"),
        noise(Medication, "Metformin 500 mg oral tablet"),
        noise(Medication, "Lisinopril 10 mg oral tablet"),
        noise(Medication, "Atorvastatin 20 mg oral tablet"),
        noise(Medication, "Omeprazole 20 mg capsule"),
        noise(Medication, "Levothyroxine 50 mcg tablet"),
        noise(Medication, "Albuterol inhaler"),
        noise(Visit, "Outpatient visit"),
        noise(Visit, "Emergency department visit"),
        noise(Visit, "Inpatient admission"),
        noise(Visit, "Telehealth follow-up"),
    ]
}

pub fn default_numeric_vocabulary() -> Vec<NumericConcept> {
    vec![
        lab("Hemoglobin", "g/dL", 9.0, 16.0),
        lab("Glucose", "mg/dL", 70.0, 220.0),
        lab("Creatinine", "mg/dL", 0.5, 2.0),
        lab("Sodium", "mmol/L", 131.0, 146.0),
        lab("Potassium", "mmol/L", 3.2, 5.4),
        lab("Heart rate", "beats/min", 52.0, 118.0),
        lab("Systolic blood pressure", "mmHg", 98.0, 172.0),
        lab("Body weight", "kg", 48.0, 120.0),
        lab("Hemoglobin A1c", "%", 5.0, 10.5),
        lab("Platelet count", "10*3/uL", 120.0, 420.0),
    ]
}

impl Default for SyntheticCohortSpec {
    fn default() -> Self {
        Self {
            n_patients: 60,
            events_per_patient: 2000,
            time_span_days: 3650,
            start: "2010-01-01 00:00:00".into(),
            planted_rules: vec![
                PlantedRule {
                    token: "ZEBRA_MARKER".into(),
                    position: Band::Early,
                    label: 1,
                },
                PlantedRule {
                    token: "OKAPI_MARKER".into(),
                    position: Band::Early,
                    label: 0,
                },
            ],
            noise_vocabulary: default_noise_vocabulary(),
            numeric_vocabulary: default_numeric_vocabulary(),
            numeric_fraction: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticCohortSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.time_span_days == 0 {
            return bad("time_span_days must be positive".into());
        }
        if parse_timestamp(&self.start).is_none() {
            return bad(format!("bad start timestamp {:?}", self.start));
        }
        if !(0.0..=1.0).contains(&self.numeric_fraction) {
            return bad("numeric_fraction out of [0,1]".into());
        }
        if self.n_patients > 0 && self.planted_rules.is_empty() {
            return bad("at least one planted rule is required".into());
        }
        if self.events_per_patient > 0 {
            if self.numeric_fraction < 1.0 && self.noise_vocabulary.is_empty() {
                return bad("noise_vocabulary is empty".into());
            }
            if self.numeric_fraction > 0.0 && self.numeric_vocabulary.is_empty() {
                return bad("numeric_vocabulary is empty".into());
            }
        }
        if let Some(n) = self.numeric_vocabulary.iter().find(|n| !(n.low <= n.high)) {
            return bad(format!("numeric concept {:?} has low > high", n.name));
        }
        let strings: Vec<String> = self
            .noise_vocabulary
            .iter()
            .map(|n| n.description.to_lowercase())
            .chain(self.numeric_vocabulary.iter().map(|n| n.name.to_lowercase()))
            .collect();
        for (i, rule) in self.planted_rules.iter().enumerate() {
            let token = rule.token.to_lowercase();
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return bad(format!("planted token {:?} must be one nonempty word", rule.token));
            }
            if strings.iter().any(|s| s.contains(&token)) {
                return bad(format!("planted token {:?} occurs in the noise vocabulary", rule.token));
            }
            if self.planted_rules[..i].iter().any(|r| r.token.to_lowercase() == token) {
                return bad(format!("planted token {:?} is repeated", rule.token));
            }
        }
        Ok(())
    }
}

pub fn synthetic_subject_id(i: usize) -> String {
    format!("SYN{i:05}")
}

pub fn planted_description(token: &str) -> String {
    format!("Clinical note: {token} documented")
}

fn patient_rng(seed: u64, i: usize) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Patients take rules round-robin, so labels are as balanced as the rule list.
/// The prediction time is the end of the span; every event lies strictly before it.
pub fn generate_synthetic_cohort(spec: &SyntheticCohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let start = parse_timestamp(&spec.start).expect("validated");
    let span_secs = spec.time_span_days as i64 * 86_400;
    let end = start + Duration::seconds(span_secs);
    let mut records = Vec::with_capacity(spec.n_patients);
    let mut labels = Vec::with_capacity(spec.n_patients);
    for i in 0..spec.n_patients {
        let subject_id = synthetic_subject_id(i);
        let rule = &spec.planted_rules[i % spec.planted_rules.len()];
        let mut rng = patient_rng(spec.seed, i);
        let mut events = Vec::with_capacity(spec.events_per_patient + 1);
        for _ in 0..spec.events_per_patient {
            let timestamp = start + Duration::seconds(rng.random_range(0..span_secs));
            let numeric = rng.random_range(0.0..1.0) < spec.numeric_fraction;
            let event = if numeric {
                let k = rng.random_range(0..spec.numeric_vocabulary.len());
                let c = &spec.numeric_vocabulary[k];
                let value = if c.low == c.high {
                    c.low
                } else {
                    round1(rng.random_range(c.low..c.high))
                };
                ClinicalEvent {
                    concept_code: format!("SYN/LAB{k}"),
                    event_type: EventType::Measurement,
                    description: c.name.clone(),
                    value: Some(EventValue::Numeric {
                        value,
                        unit: c.unit.clone(),
                    }),
                    timestamp,
                }
            } else {
                let k = rng.random_range(0..spec.noise_vocabulary.len());
                let c = &spec.noise_vocabulary[k];
                ClinicalEvent {
                    concept_code: format!("SYN/C{k}"),
                    event_type: c.event_type,
                    description: c.description.clone(),
                    value: None,
                    timestamp,
                }
            };
            events.push(event);
        }
        let (lo, hi) = rule.position.range();
        let lo_s = (lo * span_secs as f64).ceil() as i64;
        let hi_s = ((hi * span_secs as f64).ceil() as i64).min(span_secs).max(lo_s + 1);
        events.push(ClinicalEvent {
            concept_code: PLANTED_CODE.into(),
            event_type: EventType::Note,
            description: planted_description(&rule.token),
            value: None,
            timestamp: start + Duration::seconds(rng.random_range(lo_s..hi_s)),
        });
        events.sort_by_key(|e| e.timestamp);
        records.push(PatientRecord::new(subject_id.clone(), events));
        labels.push(PredictionInstance {
            subject_id,
            prediction_time: end,
            true_label: Some(rule.label),
        });
    }
    Ok(Cohort { records, labels })
}

pub fn write_synthetic_cohort(spec: &SyntheticCohortSpec, dir: &Path) -> Result<Manifest> {
    write_store(dir, &generate_synthetic_cohort(spec)?, &[])
}

/// Responder that answers correctly exactly when a planted token reaches the
/// final prompt, and otherwise gives an unparseable answer so the task fallback applies.
pub fn planted_scenario(spec: &SyntheticCohortSpec, task: &TaskSpec) -> ScriptedResponder {
    let mut r = ScriptedResponder::new("No decisive evidence in the provided context.");
    for rule in &spec.planted_rules {
        let reply = format!("The record contains a decisive marker note.\nFINAL: {}", rule.label);
        for t in [TemplateId::EvidenceFusion, TemplateId::BaselinePredict] {
            r = r.rule(ScriptRule::template(t, reply.clone()).contains(rule.token.clone()));
        }
    }
    let hi = task.factual_stance();
    let lo = task.counterfactual_stance();
    r.rule(ScriptRule::template(
        TemplateId::FactualHypothesis,
        format!("HYPOTHESIS: {hi} | reviewed the retrieved notes for the outcome"),
    ))
    .rule(ScriptRule::template(
        TemplateId::CounterfactualHypothesis,
        format!("HYPOTHESIS: {lo} | reviewed the retrieved notes against the outcome"),
    ))
    .rule(ScriptRule::template(TemplateId::Sufficiency, "SUFFICIENT: no"))
    .rule(ScriptRule::template(
        TemplateId::QueryRefine,
        "MISSING: earliest documented clinical note",
    ))
    .rule(ScriptRule::template(
        TemplateId::ReactStep,
        "THOUGHT: the decisive note may be older\nQUERY: earliest documented clinical note",
    ))
}
