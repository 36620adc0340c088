use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    BaselinePredict,
    IndicatorSelect,
    QueryRefine,
    Sufficiency,
    FactualHypothesis,
    CounterfactualHypothesis,
    EvidenceFusion,
    ReactStep,
}

impl TemplateId {
    pub const ALL: [TemplateId; 8] = [
        TemplateId::BaselinePredict,
        TemplateId::IndicatorSelect,
        TemplateId::QueryRefine,
        TemplateId::Sufficiency,
        TemplateId::FactualHypothesis,
        TemplateId::CounterfactualHypothesis,
        TemplateId::EvidenceFusion,
        TemplateId::ReactStep,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateId::BaselinePredict => "baseline_predict",
            TemplateId::IndicatorSelect => "indicator_select",
            TemplateId::QueryRefine => "query_refine",
            TemplateId::Sufficiency => "sufficiency",
            TemplateId::FactualHypothesis => "factual_hypothesis",
            TemplateId::CounterfactualHypothesis => "counterfactual_hypothesis",
            TemplateId::EvidenceFusion => "evidence_fusion",
            TemplateId::ReactStep => "react_step",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const TASK_HEADER: &str = "Task: {{task_name}}
{{task_description}}
Labels: {{label_legend}}
Instructions: {{instructions}}";

const BASELINE_PREDICT: &str = "You are a clinical prediction assistant reviewing a patient's structured electronic health record.

{{task_header}}

Patient events (chronological):
{{evidence}}

Predict the label for this patient as of {{prediction_time}}. Explain briefly, then finish with one line of the form
FINAL: <label>";

const INDICATOR_SELECT: &str = "You are selecting numeric clinical indicators for a prediction task.

Task: {{task_name}}
{{task_description}}
Query: {{query}}

Candidate indicators, one per line:
{{candidates}}

Choose the {{n_fine}} indicators most relevant to the task, ordered by priority. Copy names exactly as listed. Answer with one line of the form
SELECTED: <name>; <name>; ...";

const QUERY_REFINE: &str = "You are refining a retrieval query over a patient's health record.

Task: {{task_name}}
{{task_description}}
Current query: {{query}}
Previous queries:
{{query_history}}

Evidence retrieved so far (chronological):
{{evidence}}

Identify one clinically salient aspect that the evidence does not yet cover. Write a concise retrieval query about that single aspect, different from every previous query. Answer with one line of the form
MISSING: <query>";

const SUFFICIENCY: &str = "You are checking whether retrieved evidence is enough for a clinical prediction.

Task: {{task_name}}
{{task_description}}
Current query: {{query}}

Evidence retrieved so far (chronological):
{{evidence}}

Is this evidence sufficient to make the prediction? Answer with exactly one line: SUFFICIENT: yes or SUFFICIENT: no";

const FACTUAL_HYPOTHESIS: &str = "You are assessing evidence that the target outcome is present.

{{task_header}}

Numeric indicator trajectories:
{{numeric_evidence}}

Clinical events retrieved as support for the outcome (chronological):
{{evidence}}

Form an explicit hypothesis about this patient's label from the evidence above. Finish with one line of the form
HYPOTHESIS: <label> | <one-sentence rationale>";

const COUNTERFACTUAL_HYPOTHESIS: &str = "You are assessing evidence that the target outcome is absent.

{{task_header}}

Numeric indicator trajectories:
{{numeric_evidence}}

Clinical events retrieved as support for the absence of the outcome (chronological):
{{evidence}}

Form an explicit hypothesis about this patient's label from the evidence above. Finish with one line of the form
HYPOTHESIS: <label> | <one-sentence rationale>";

const EVIDENCE_FUSION: &str = "You are making a final clinical prediction from two competing hypotheses.

{{task_header}}

Numeric indicator trajectories:
{{numeric_evidence}}

Clinical events from both retrieval paths (chronological):
{{evidence}}

Hypothesis supporting the outcome: label {{factual_label}}. {{factual_rationale}}
Hypothesis supporting its absence: label {{counterfactual_label}}. {{counterfactual_rationale}}

Compare the evidence behind each hypothesis for its strength, its directness and its clinical relevance to this task. Then finish with one line of the form
FINAL: <label>";

const REACT_STEP: &str = "You are solving a clinical prediction task by alternating reasoning and retrieval over a patient's health record.

{{task_header}}

Step {{step}} of {{total_steps}}.
Evidence retrieved so far (chronological):
{{evidence}}

Reason about what information is still needed, then write the next search query. Reply with
THOUGHT: <reasoning>
QUERY: <search query>";

/// A prompt body with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub body: String,
    pub required_vars: Vec<String>,
}

/// Placeholder names in order of first appearance.
pub fn placeholders(body: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let name = after[..end].trim().to_string();
                if !out.contains(&name) {
                    out.push(name);
                }
                rest = &after[end + 2..];
            }
            None => break,
        }
    }
    out
}

impl PromptTemplate {
    pub fn new(template_id: TemplateId, body: impl Into<String>) -> Self {
        let body = body.into();
        let required_vars = placeholders(&body);
        Self {
            template_id,
            body,
            required_vars,
        }
    }

    pub fn builtin(id: TemplateId) -> Self {
        let body = match id {
            TemplateId::BaselinePredict => BASELINE_PREDICT,
            TemplateId::IndicatorSelect => INDICATOR_SELECT,
            TemplateId::QueryRefine => QUERY_REFINE,
            TemplateId::Sufficiency => SUFFICIENCY,
            TemplateId::FactualHypothesis => FACTUAL_HYPOTHESIS,
            TemplateId::CounterfactualHypothesis => COUNTERFACTUAL_HYPOTHESIS,
            TemplateId::EvidenceFusion => EVIDENCE_FUSION,
            TemplateId::ReactStep => REACT_STEP,
        };
        Self::new(id, body.replace("{{task_header}}", TASK_HEADER))
    }

    /// Substitute every placeholder; a missing variable is an error naming it.
    pub fn render(&self, vars: &BTreeMap<String, String>) -> Result<String> {
        if let Some(missing) = self.required_vars.iter().find(|v| !vars.contains_key(*v)) {
            return Err(Error::MissingVar(missing.clone()));
        }
        // single pass so substituted values are never re-scanned
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            let Some(end) = after.find("}}") else { break };
            out.push_str(&rest[..start]);
            out.push_str(&vars[after[..end].trim()]);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

pub fn render_prompt(template_id: TemplateId, vars: &BTreeMap<String, String>) -> Result<String> {
    PromptTemplate::builtin(template_id).render(vars)
}
