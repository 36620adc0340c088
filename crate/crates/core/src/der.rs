//! Dual-path reasoning: factual and counterfactual retrieval, per-path hypotheses,
//! evidence fusion and the final comparative decision.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::air::{iterative_retrieve, merge_evidence, AirParams, AirRun, AirTrace};
use crate::error::{Error, Result};
use crate::ether::{numeric_pipeline, IndicatorParams, NumericEvidence, TemporalScoringParams};
use crate::gateway::parse::{marker_line, parse_label, FINAL_MARKER, HYPOTHESIS_MARKER};
use crate::gateway::{Gateway, PromptInput, Session, TemplateId, TranscriptEntry};
use crate::index::{build_index_with, ChunkingParams, EmbeddingProvider, EventFilter, EvidenceChunk};
use crate::model::{history_before, PatientRecord, PredictionInstance, Timestamp};
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Factual,
    Counterfactual,
}

impl PathKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PathKind::Factual => "factual",
            PathKind::Counterfactual => "counterfactual",
        }
    }

    fn template(&self) -> TemplateId {
        match self {
            PathKind::Factual => TemplateId::FactualHypothesis,
            PathKind::Counterfactual => TemplateId::CounterfactualHypothesis,
        }
    }

    /// Label the path argues for when the model gives none.
    pub fn nominal_stance(&self, task: &TaskSpec) -> i64 {
        match self {
            PathKind::Factual => task.factual_stance(),
            PathKind::Counterfactual => task.counterfactual_stance(),
        }
    }
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub path: PathKind,
    pub stance_label: i64,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_phrase: Option<String>,
    /// The stance came from the path default, not the model.
    #[serde(default)]
    pub defaulted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Plus,
    Minus,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedChunk {
    pub chunk: EvidenceChunk,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusedEvidence {
    /// Chronological, duplicate-free.
    pub chunks: Vec<FusedChunk>,
    pub numeric: NumericEvidence,
}

impl FusedEvidence {
    pub fn chunk_ids(&self) -> Vec<String> {
        self.chunks.iter().map(|c| c.chunk.chunk_id.clone()).collect()
    }
}

/// One prediction with everything needed to audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub subject_id: String,
    pub task_id: String,
    pub method: String,
    pub prediction_time: Timestamp,
    pub predicted_label: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factual_hypothesis: Option<Hypothesis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual_hypothesis: Option<Hypothesis>,
    pub fused_evidence_ids: Vec<String>,
    pub numeric_indicators: Vec<String>,
    pub traces: Vec<AirTrace>,
    pub rationale: String,
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transcript: Vec<TranscriptEntry>,
}

/// Settings for the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EhrRagParams {
    pub ether: TemporalScoringParams,
    pub indicators: IndicatorParams,
    pub air: AirParams,
    pub chunking: ChunkingParams,
    pub embed_in_flight: usize,
    /// Run the two retrieval paths on separate threads.
    pub parallel_paths: bool,
}

impl Default for EhrRagParams {
    fn default() -> Self {
        Self {
            ether: TemporalScoringParams::default(),
            indicators: IndicatorParams::default(),
            air: AirParams::default(),
            chunking: ChunkingParams::default(),
            embed_in_flight: 4,
            parallel_paths: true,
        }
    }
}

pub struct Providers<'a> {
    pub embedder: &'a dyn EmbeddingProvider,
    pub gateway: &'a Gateway,
}

pub fn dual_queries(task: &TaskSpec) -> (String, String) {
    (task.factual_query.clone(), task.counterfactual_query.clone())
}

fn task_vars(input: PromptInput, task: &TaskSpec) -> PromptInput {
    input
        .var("task_name", task.name.clone())
        .var("task_description", task.description.clone())
        .var("label_legend", task.label_legend())
        .var("instructions", task.instructions_text())
}

fn parse_hypothesis(reply: &str, path: PathKind, task: &TaskSpec) -> Option<Hypothesis> {
    let stance_label = parse_label(reply, HYPOTHESIS_MARKER, &task.label_values).ok()?;
    let line = marker_line(reply, HYPOTHESIS_MARKER).unwrap_or("");
    let rationale = match line.split_once('|') {
        Some((_, r)) if !r.trim().is_empty() => r.trim().to_string(),
        _ => reply
            .lines()
            .take_while(|l| !l.to_ascii_uppercase().contains(HYPOTHESIS_MARKER))
            .collect::<Vec<_>>()
            .join(" ")
            .trim()
            .to_string(),
    };
    let confidence_phrase = marker_line(reply, "CONFIDENCE:")
        .filter(|c| !c.is_empty())
        .map(str::to_string);
    Some(Hypothesis {
        path,
        stance_label,
        rationale,
        confidence_phrase,
        defaulted: false,
    })
}

pub fn path_hypothesis(
    session: &mut Session<'_>,
    task: &TaskSpec,
    path_evidence: &[EvidenceChunk],
    numeric: &NumericEvidence,
    path: PathKind,
) -> Result<Hypothesis> {
    let input = task_vars(PromptInput::new(path.template()), task)
        .var("numeric_evidence", numeric.render())
        .evidence(path_evidence.iter().map(|c| c.text.clone()).collect(), "\n\n");
    match session.complete_parsed(&input, |r| parse_hypothesis(r, path, task))? {
        Some(h) => Ok(h),
        None => {
            session.flag(format!("{path} hypothesis unparseable; using nominal stance"));
            Ok(Hypothesis {
                path,
                stance_label: path.nominal_stance(task),
                rationale: String::new(),
                confidence_phrase: None,
                defaulted: true,
            })
        }
    }
}

pub fn fuse_evidence(e_plus: &[EvidenceChunk], e_minus: &[EvidenceChunk], numeric: &NumericEvidence) -> FusedEvidence {
    let mut provenance: BTreeMap<&str, Provenance> = BTreeMap::new();
    for c in e_plus {
        provenance.insert(&c.chunk_id, Provenance::Plus);
    }
    for c in e_minus {
        provenance
            .entry(&c.chunk_id)
            .and_modify(|p| {
                if *p == Provenance::Plus {
                    *p = Provenance::Both
                }
            })
            .or_insert(Provenance::Minus);
    }
    let chunks = merge_evidence(e_plus, e_minus)
        .into_iter()
        .map(|chunk| FusedChunk {
            provenance: provenance[chunk.chunk_id.as_str()],
            chunk,
        })
        .collect();
    FusedEvidence {
        chunks,
        numeric: numeric.clone(),
    }
}

fn provenance_note(p: Provenance) -> &'static str {
    match p {
        Provenance::Plus => "(retrieved for the outcome)",
        Provenance::Minus => "(retrieved against the outcome)",
        Provenance::Both => "(retrieved by both paths)",
    }
}

/// Text before the answer line, used as the rationale.
pub fn rationale_before(reply: &str, marker: &str) -> String {
    let upper = reply.to_ascii_uppercase();
    let end = upper.find(marker).unwrap_or(reply.len());
    reply[..end].trim().to_string()
}

pub struct Decision {
    pub label: i64,
    pub rationale: String,
    pub fallback: bool,
}

pub fn decide(
    session: &mut Session<'_>,
    task: &TaskSpec,
    fused: &FusedEvidence,
    h_plus: &Hypothesis,
    h_minus: &Hypothesis,
) -> Result<Decision> {
    let input = task_vars(PromptInput::new(TemplateId::EvidenceFusion), task)
        .var("numeric_evidence", fused.numeric.render())
        .var("factual_label", h_plus.stance_label.to_string())
        .var("factual_rationale", h_plus.rationale.clone())
        .var("counterfactual_label", h_minus.stance_label.to_string())
        .var("counterfactual_rationale", h_minus.rationale.clone())
        .evidence(
            fused
                .chunks
                .iter()
                .map(|c| format!("{}\n{}", provenance_note(c.provenance), c.chunk.text))
                .collect(),
            "\n\n",
        );
    let mut last = String::new();
    let parsed = session.complete_parsed(&input, |r| {
        last = r.to_string();
        parse_label(r, FINAL_MARKER, &task.label_values).ok()
    })?;
    Ok(match parsed {
        Some(label) => Decision {
            label,
            rationale: rationale_before(&last, FINAL_MARKER),
            fallback: false,
        },
        None => {
            session.flag("final decision unparseable; using task fallback label");
            Decision {
                label: task.decision_fallback(),
                rationale: rationale_before(&last, FINAL_MARKER),
                fallback: true,
            }
        }
    })
}

fn with_partial(err: Error, trace: AirTrace) -> Error {
    match err {
        Error::Stage {
            stage,
            source,
            mut partial_traces,
        } => {
            partial_traces.push(trace);
            Error::Stage {
                stage,
                source,
                partial_traces,
            }
        }
        other => other.in_stage("retrieval", vec![trace]),
    }
}

struct PathOutcome {
    run: AirRun,
    hypothesis: Hypothesis,
}

#[allow(clippy::too_many_arguments)]
fn run_path(
    session: &mut Session<'_>,
    task: &TaskSpec,
    query: &str,
    path: PathKind,
    index: &crate::index::VectorIndex,
    tau_star: Timestamp,
    numeric: &NumericEvidence,
    params: &EhrRagParams,
    embedder: &dyn EmbeddingProvider,
) -> Result<PathOutcome> {
    let run = iterative_retrieve(
        session,
        task,
        query,
        index,
        tau_star,
        &params.ether,
        &params.air,
        embedder,
    )
    .map_err(|e| e.in_stage("retrieval", Vec::new()))?;
    let hypothesis = path_hypothesis(session, task, &run.evidence, numeric, path)
        .map_err(|e| e.in_stage("hypothesis", vec![run.trace.clone()]))?;
    Ok(PathOutcome { run, hypothesis })
}

/// Cutoff, index, shared numeric evidence, two retrieval paths, hypotheses, fusion, decision.
pub fn predict_patient(
    record: &PatientRecord,
    instance: &PredictionInstance,
    task: &TaskSpec,
    params: &EhrRagParams,
    providers: &Providers<'_>,
) -> Result<PredictionResult> {
    let tau_star = instance.prediction_time;
    let index = build_index_with(
        record,
        tau_star,
        providers.embedder,
        params.chunking,
        EventFilter::TextualOnly,
        params.embed_in_flight,
    )
    .map_err(|e| e.in_stage("index", Vec::new()))?;

    let history = history_before(record, tau_star);
    let mut numeric_session = providers.gateway.session("numeric");
    let numeric = numeric_pipeline(
        &mut numeric_session,
        task,
        history,
        tau_star,
        params.indicators,
        providers.embedder,
    )
    .map_err(|e| e.in_stage("numeric", Vec::new()))?;

    let (q_plus, q_minus) = dual_queries(task);
    let mut plus_session = providers.gateway.session(PathKind::Factual.as_str());
    let mut minus_session = providers.gateway.session(PathKind::Counterfactual.as_str());
    let go = |s: &mut Session<'_>, q: &str, p: PathKind| {
        run_path(s, task, q, p, &index, tau_star, &numeric, params, providers.embedder)
    };
    let (plus, minus) = if params.parallel_paths {
        std::thread::scope(|scope| {
            let handle = scope.spawn(|| go(&mut minus_session, &q_minus, PathKind::Counterfactual));
            let plus = go(&mut plus_session, &q_plus, PathKind::Factual);
            (plus, handle.join().expect("counterfactual path panicked"))
        })
    } else {
        (
            go(&mut plus_session, &q_plus, PathKind::Factual),
            go(&mut minus_session, &q_minus, PathKind::Counterfactual),
        )
    };
    let (plus, minus) = match (plus, minus) {
        (Ok(p), Ok(m)) => (p, m),
        (Err(e), Ok(done)) | (Ok(done), Err(e)) => return Err(with_partial(e, done.run.trace)),
        (Err(e), Err(_)) => return Err(e),
    };

    let fused = fuse_evidence(&plus.run.evidence, &minus.run.evidence, &numeric);
    let mut decision_session = providers.gateway.session("decision");
    let decision = decide(&mut decision_session, task, &fused, &plus.hypothesis, &minus.hypothesis)
        .map_err(|e| e.in_stage("decision", vec![plus.run.trace.clone(), minus.run.trace.clone()]))?;

    let mut transcript = Vec::new();
    let mut flags = index.diagnostics.clone();
    for s in [numeric_session, plus_session, minus_session, decision_session] {
        let (entries, f) = s.into_parts();
        transcript.extend(entries);
        flags.extend(f);
    }
    Ok(PredictionResult {
        subject_id: record.subject_id.clone(),
        task_id: task.task_id.clone(),
        method: "ehr-rag".into(),
        prediction_time: tau_star,
        predicted_label: decision.label,
        true_label: instance.true_label,
        factual_hypothesis: Some(plus.hypothesis),
        counterfactual_hypothesis: Some(minus.hypothesis),
        fused_evidence_ids: fused.chunk_ids(),
        numeric_indicators: numeric.indicator_names(),
        traces: vec![plus.run.trace, minus.run.trace],
        rationale: decision.rationale,
        flags,
        transcript,
    })
}
