//! Prediction task metadata.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelType {
    Binary,
    Multiclass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub name: String,
    #[serde(default)]
    pub category: String,
    pub description: String,
    pub factual_query: String,
    pub counterfactual_query: String,
    pub base_query: String,
    pub label_type: LabelType,
    pub label_values: Vec<i64>,
    #[serde(default, with = "label_keys")]
    pub label_descriptions: BTreeMap<i64, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructions: Option<String>,
    /// Label emitted when the final answer cannot be parsed. Defaults to the first label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_label: Option<i64>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(format!("task {}: {msg}", self.task_id)));
        if self.task_id.trim().is_empty() {
            return Err(Error::Validation("task_id is empty".into()));
        }
        if self.label_values.is_empty() {
            return bad("label_values is empty".into());
        }
        let distinct: BTreeSet<_> = self.label_values.iter().collect();
        if distinct.len() != self.label_values.len() {
            return bad("label_values are not distinct".into());
        }
        if self.label_type == LabelType::Binary && self.label_values.len() != 2 {
            return bad("binary task must declare exactly two labels".into());
        }
        if self.factual_query.trim().is_empty() || self.counterfactual_query.trim().is_empty() {
            return bad("factual and counterfactual queries must be nonempty".into());
        }
        if self.factual_query == self.counterfactual_query {
            return bad("factual and counterfactual queries must differ".into());
        }
        if self.base_query.trim().is_empty() {
            return bad("base_query is empty".into());
        }
        if let Some(k) = self
            .label_descriptions
            .keys()
            .find(|k| !self.label_values.contains(k))
        {
            return bad(format!("description for undeclared label {k}"));
        }
        if let Some(f) = self.fallback_label {
            if !self.label_values.contains(&f) {
                return bad(format!("fallback label {f} not in label_values"));
            }
        }
        Ok(())
    }

    pub fn has_label(&self, label: i64) -> bool {
        self.label_values.contains(&label)
    }

    pub fn decision_fallback(&self) -> i64 {
        self.fallback_label.unwrap_or(self.label_values[0])
    }

    /// Stance the factual path argues for: the highest (outcome-present / most severe) label.
    pub fn factual_stance(&self) -> i64 {
        *self.label_values.iter().max().expect("validated task")
    }

    /// Stance the counterfactual path argues for: the lowest (outcome-absent) label.
    pub fn counterfactual_stance(&self) -> i64 {
        *self.label_values.iter().min().expect("validated task")
    }

    /// `0 = <7 days, 1 = >=7 days` style rendering for prompts.
    pub fn label_legend(&self) -> String {
        self.label_values
            .iter()
            .map(|l| match self.label_descriptions.get(l) {
                Some(d) => format!("{l} = {d}"),
                None => l.to_string(),
            })
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn instructions_text(&self) -> &str {
        self.instructions
            .as_deref()
            .unwrap_or("No instructions provided.")
    }
}

// TOML tables only take string keys.
mod label_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<i64, String>, s: S) -> Result<S::Ok, S::Error> {
        map.iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<i64, String>, D::Error> {
        BTreeMap::<String, String>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.trim()
                    .parse::<i64>()
                    .map(|k| (k, v))
                    .map_err(|_| D::Error::custom(format!("label key {k:?} is not an integer")))
            })
            .collect()
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct TaskFile {
    #[serde(default)]
    tasks: Vec<TaskSpec>,
}

/// Load tasks from a TOML file with one `[[tasks]]` table per task.
pub fn load_tasks(path: &Path) -> Result<Vec<TaskSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: TaskFile =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for t in &file.tasks {
        t.validate()?;
    }
    Ok(file.tasks)
}

fn descriptions(pairs: &[(i64, &str)]) -> BTreeMap<i64, String> {
    pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
}

/// The four built-in long-horizon tasks.
pub fn builtin_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            task_id: "guo_los".into(),
            name: "Long Length of Stay".into(),
            category: "Operational Outcomes".into(),
            description: "Predict whether a patient will have a long hospital stay (≥7 days) based on their EHR data.".into(),
            factual_query: "clinical factors and events associated with prolonged hospital stay".into(),
            counterfactual_query: "clinical factors and events associated with short hospital stay".into(),
            base_query: "Predict whether a patient will have a long hospital stay (≥7 days) based on their EHR data.".into(),
            label_type: LabelType::Binary,
            label_values: vec![0, 1],
            label_descriptions: descriptions(&[(0, "<7 days"), (1, "≥7 days")]),
            instructions: None,
            fallback_label: Some(0),
        },
        TaskSpec {
            task_id: "guo_readmission".into(),
            name: "30-day Readmission".into(),
            category: "Operational Outcomes".into(),
            description: "Predict whether a patient will be readmitted within 30 days after hospital discharge based on their EHR data.".into(),
            factual_query: "clinical factors and events associated with 30-day hospital readmission".into(),
            counterfactual_query: "clinical factors and events associated with no readmission".into(),
            base_query: "Predict whether a patient will be readmitted within 30 days after hospital discharge based on their EHR data.".into(),
            label_type: LabelType::Binary,
            label_values: vec![0, 1],
            label_descriptions: descriptions(&[(0, "no readmission"), (1, "readmission")]),
            instructions: Some("30-day readmission is uncommon. Default to 0 unless there is clear, strong, patient-specific evidence; do not predict 1 from vague risk factors.".into()),
            fallback_label: Some(0),
        },
        TaskSpec {
            task_id: "new_acutemi".into(),
            name: "Acute Myocardial Infarction".into(),
            category: "Assignment of New Diagnoses".into(),
            description: "Predict whether a patient will receive a new acute myocardial infarction diagnosis within 1 year after discharge based on their EHR data.".into(),
            factual_query: "clinical risk factors and events associated with acute myocardial infarction".into(),
            counterfactual_query: "clinical risk factors and events indicating absence of acute myocardial infarction".into(),
            base_query: "Predict whether a patient will receive a new acute myocardial infarction diagnosis within 1 year after discharge based on their EHR data.".into(),
            label_type: LabelType::Binary,
            label_values: vec![0, 1],
            label_descriptions: descriptions(&[(0, "no diagnosis"), (1, "diagnosis")]),
            instructions: Some("Be sensitive to positives: if there is any reasonable, patient-specific evidence suggesting acute MI, lean toward 1; if uncertain, prefer 1.".into()),
            fallback_label: Some(1),
        },
        TaskSpec {
            task_id: "lab_anemia".into(),
            name: "Anemia".into(),
            category: "Anticipating Lab Test Results".into(),
            description: "Predict the severity category of the next anemia-related laboratory result based on the patient's prior EHR data.".into(),
            factual_query: "clinical factors and events relevant to predicting anemia severity".into(),
            counterfactual_query: "clinical factors and events indicating no anemia".into(),
            base_query: "Predict the severity category of the next anemia-related laboratory result based on the patient's prior EHR data.".into(),
            label_type: LabelType::Multiclass,
            label_values: vec![0, 1, 2, 3],
            label_descriptions: descriptions(&[(0, "low"), (1, "medium"), (2, "high"), (3, "abnormal")]),
            instructions: Some("Choose among {0,1,2,3} with calibrated preference for mild-to-moderate (1 or 2) when uncertain; use 0 only with strong evidence of no anemia; use 3 only with clear severe/abnormal anemia evidence.".into()),
            fallback_label: Some(1),
        },
        TaskSpec {
            task_id: "synthetic_marker".into(),
            name: "Synthetic marker".into(),
            category: "Synthetic".into(),
            description: "Predict the outcome documented by a single decisive marker note somewhere in the patient's history.".into(),
            factual_query: "clinical note documenting a marker that supports the outcome".into(),
            counterfactual_query: "clinical note documenting a marker against the outcome".into(),
            base_query: "Predict the outcome documented by a single decisive marker note somewhere in the patient's history.".into(),
            label_type: LabelType::Binary,
            label_values: vec![0, 1],
            label_descriptions: descriptions(&[(0, "negative"), (1, "positive")]),
            instructions: None,
            fallback_label: Some(0),
        },
    ]
}

/// Resolve a task id against an optional task file, then the built-ins.
pub fn find_task(task_id: &str, tasks_file: Option<&Path>) -> Result<TaskSpec> {
    if let Some(path) = tasks_file {
        if let Some(t) = load_tasks(path)?.into_iter().find(|t| t.task_id == task_id) {
            return Ok(t);
        }
    }
    builtin_tasks()
        .into_iter()
        .find(|t| t.task_id == task_id)
        .ok_or_else(|| Error::Config(format!("unknown task id {task_id:?}")))
}
