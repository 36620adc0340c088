//! Comparison methods sharing the index, gateway and event serialization.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::air::{merge_evidence, AirTrace, IterationRecord};
use crate::der::{rationale_before, PredictionResult};
use crate::error::{Error, Result};
use crate::ether::chronological_order;
use crate::gateway::parse::{marker_line, parse_label, FINAL_MARKER, QUERY_MARKER};
use crate::gateway::{Gateway, PromptInput, Session, TemplateId};
use crate::index::{search_semantic, EmbeddingProvider, EvidenceChunk, VectorIndex};
use crate::ingest::serialize_event;
use crate::model::{format_timestamp, history_before, ClinicalEvent, PatientRecord, PredictionInstance};
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ehr-rag")]
    EhrRag,
    #[serde(rename = "direct")]
    Direct,
    #[serde(rename = "rag")]
    VanillaRag,
    #[serde(rename = "uniform")]
    UniformRag,
    #[serde(rename = "rule")]
    RuleBased,
    #[serde(rename = "react")]
    ReactRag,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::EhrRag,
        Method::Direct,
        Method::VanillaRag,
        Method::UniformRag,
        Method::RuleBased,
        Method::ReactRag,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::EhrRag => "ehr-rag",
            Method::Direct => "direct",
            Method::VanillaRag => "rag",
            Method::UniformRag => "uniform",
            Method::RuleBased => "rule",
            Method::ReactRag => "react",
        }
    }

    /// Whether the method searches a chunk index.
    pub fn uses_index(&self) -> bool {
        matches!(
            self,
            Method::EhrRag | Method::VanillaRag | Method::UniformRag | Method::ReactRag
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?}; expected one of ehr-rag, direct, rag, uniform, rule, react"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Events given to direct generation and rule-based retrieval.
    pub event_budget: usize,
    /// Chunks for vanilla retrieval; uniform sampling matches its row count.
    pub top_k_chunks: usize,
    pub react_top_k: usize,
    pub react_iterations: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            event_budget: 1000,
            top_k_chunks: 10,
            react_top_k: 5,
            react_iterations: 3,
            seed: 42,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.event_budget == 0
            || self.top_k_chunks == 0
            || self.react_top_k == 0
            || self.react_iterations == 0
        {
            return Err(Error::Config("baseline budgets must be positive".into()));
        }
        Ok(())
    }
}

struct Outcome {
    label: i64,
    rationale: String,
    flags: Vec<String>,
    transcript: Vec<crate::gateway::TranscriptEntry>,
}

fn predict_call(
    mut session: Session<'_>,
    task: &TaskSpec,
    instance: &PredictionInstance,
    evidence: Vec<String>,
    separator: &str,
) -> Result<Outcome> {
    let input = PromptInput::new(TemplateId::BaselinePredict)
        .var("task_name", task.name.clone())
        .var("task_description", task.description.clone())
        .var("label_legend", task.label_legend())
        .var("instructions", task.instructions_text())
        .var("prediction_time", format_timestamp(&instance.prediction_time))
        .evidence(evidence, separator);
    let mut last = String::new();
    let parsed = session.complete_parsed(&input, |r| {
        last = r.to_string();
        parse_label(r, FINAL_MARKER, &task.label_values).ok()
    })?;
    let label = match parsed {
        Some(l) => l,
        None => {
            session.flag("final answer unparseable; using task fallback label");
            task.decision_fallback()
        }
    };
    let (transcript, flags) = session.into_parts();
    Ok(Outcome {
        label,
        rationale: rationale_before(&last, FINAL_MARKER),
        flags,
        transcript,
    })
}

fn result(
    method: Method,
    record: &PatientRecord,
    instance: &PredictionInstance,
    task: &TaskSpec,
    evidence_ids: Vec<String>,
    traces: Vec<AirTrace>,
    mut flags: Vec<String>,
    outcome: Outcome,
) -> PredictionResult {
    flags.extend(outcome.flags);
    PredictionResult {
        subject_id: record.subject_id.clone(),
        task_id: task.task_id.clone(),
        method: method.as_str().into(),
        prediction_time: instance.prediction_time,
        predicted_label: outcome.label,
        true_label: instance.true_label,
        factual_hypothesis: None,
        counterfactual_hypothesis: None,
        fused_evidence_ids: evidence_ids,
        numeric_indicators: Vec::new(),
        traces,
        rationale: outcome.rationale,
        flags,
        transcript: outcome.transcript,
    }
}

fn row_ids(rows: &[usize]) -> Vec<String> {
    rows.iter().map(|i| format!("row:{i}")).collect()
}

/// Row positions of the most recent `budget` visible events.
pub fn select_recent(history: &[ClinicalEvent], budget: usize) -> Vec<usize> {
    (history.len().saturating_sub(budget)..history.len()).collect()
}

pub fn direct_generation(
    record: &PatientRecord,
    instance: &PredictionInstance,
    task: &TaskSpec,
    gateway: &Gateway,
    budget: usize,
) -> Result<PredictionResult> {
    let history = history_before(record, instance.prediction_time);
    let selected = select_recent(history, budget);
    let lines = selected.iter().map(|&i| serialize_event(&history[i])).collect();
    let outcome = predict_call(gateway.session("direct"), task, instance, lines, "\n")?;
    Ok(result(
        Method::Direct,
        record,
        instance,
        task,
        row_ids(&selected),
        Vec::new(),
        Vec::new(),
        outcome,
    ))
}

/// Visible events ranked by concept frequency (ties: newer first, then code),
/// truncated to `budget`; row positions in chronological order.
pub fn select_by_frequency(history: &[ClinicalEvent], budget: usize) -> Vec<usize> {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for e in history {
        *freq.entry(e.concept_code.as_str()).or_default() += 1;
    }
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&history[a], &history[b]);
        freq[eb.concept_code.as_str()]
            .cmp(&freq[ea.concept_code.as_str()])
            .then_with(|| eb.timestamp.cmp(&ea.timestamp))
            .then_with(|| ea.concept_code.cmp(&eb.concept_code))
            .then_with(|| b.cmp(&a))
    });
    order.truncate(budget);
    order.sort_unstable();
    order
}

pub fn rule_based_rag(
    record: &PatientRecord,
    instance: &PredictionInstance,
    task: &TaskSpec,
    gateway: &Gateway,
    budget: usize,
) -> Result<PredictionResult> {
    let history = history_before(record, instance.prediction_time);
    let selected = select_by_frequency(history, budget);
    let lines = selected.iter().map(|&i| serialize_event(&history[i])).collect();
    let outcome = predict_call(gateway.session("rule"), task, instance, lines, "\n")?;
    Ok(result(
        Method::RuleBased,
        record,
        instance,
        task,
        row_ids(&selected),
        Vec::new(),
        Vec::new(),
        outcome,
    ))
}

fn chunk_texts(chunks: &[EvidenceChunk]) -> Vec<String> {
    chunks.iter().map(|c| c.text.clone()).collect()
}

fn chunk_ids(chunks: &[EvidenceChunk]) -> Vec<String> {
    chunks.iter().map(|c| c.chunk_id.clone()).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn vanilla_rag(
    record: &PatientRecord,
    instance: &PredictionInstance,
    task: &TaskSpec,
    index: &VectorIndex,
    gateway: &Gateway,
    embedder: &dyn EmbeddingProvider,
    k: usize,
) -> Result<PredictionResult> {
    let mut chunks: Vec<EvidenceChunk> = search_semantic(index, &task.base_query, k, embedder)?
        .into_iter()
        .map(|s| s.chunk)
        .collect();
    chunks.sort_by(chronological_order);
    let outcome = predict_call(gateway.session("rag"), task, instance, chunk_texts(&chunks), "\n\n")?;
    Ok(result(
        Method::VanillaRag,
        record,
        instance,
        task,
        chunk_ids(&chunks),
        Vec::new(),
        Vec::new(),
        outcome,
    ))
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Per-subject stream seed so patients sample independently of processing order.
pub fn subject_seed(seed: u64, subject_id: &str) -> u64 {
    seed ^ fnv1a(subject_id)
}

/// Chunks drawn uniformly without replacement until `row_budget` event rows are covered.
pub fn sample_uniform(index: &VectorIndex, row_budget: usize, seed: u64) -> Vec<EvidenceChunk> {
    let mut order: Vec<usize> = (0..index.chunks.len()).collect();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut rows = 0;
    let mut out = Vec::new();
    for i in order {
        if rows >= row_budget {
            break;
        }
        let c = &index.chunks[i];
        rows += c.row_span.len();
        out.push(c.clone());
    }
    out.sort_by(chronological_order);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn uniform_rag(
    record: &PatientRecord,
    instance: &PredictionInstance,
    task: &TaskSpec,
    index: &VectorIndex,
    gateway: &Gateway,
    k: usize,
    seed: u64,
) -> Result<PredictionResult> {
    let budget = k * index.chunking.chunk_size;
    let chunks = sample_uniform(index, budget, subject_seed(seed, &record.subject_id));
    let outcome = predict_call(gateway.session("uniform"), task, instance, chunk_texts(&chunks), "\n\n")?;
    Ok(result(
        Method::UniformRag,
        record,
        instance,
        task,
        chunk_ids(&chunks),
        Vec::new(),
        vec![format!("uniform sampler xoshiro256++ seed {seed}")],
        outcome,
    ))
}

fn parse_react_query(reply: &str) -> Option<String> {
    marker_line(reply, QUERY_MARKER)
        .map(|q| q.trim_matches('"').trim().to_string())
        .filter(|q| !q.is_empty())
}

/// Reason-act loop: each step the model names a query, top-`k` semantic hits are merged.
#[allow(clippy::too_many_arguments)]
pub fn react_rag(
    record: &PatientRecord,
    instance: &PredictionInstance,
    task: &TaskSpec,
    index: &VectorIndex,
    gateway: &Gateway,
    embedder: &dyn EmbeddingProvider,
    k: usize,
    iterations: usize,
) -> Result<PredictionResult> {
    let mut session = gateway.session("react");
    let mut evidence: Vec<EvidenceChunk> = Vec::new();
    let mut trace = AirTrace {
        subject_id: record.subject_id.clone(),
        path: "react".into(),
        rounds: Vec::new(),
        final_verdict: None,
        flags: Vec::new(),
    };
    for step in 1..=iterations {
        let input = PromptInput::new(TemplateId::ReactStep)
            .var("task_name", task.name.clone())
            .var("task_description", task.description.clone())
            .var("label_legend", task.label_legend())
            .var("instructions", task.instructions_text())
            .var("step", step.to_string())
            .var("total_steps", iterations.to_string())
            .evidence(chunk_texts(&evidence), "\n\n");
        let reply = session.complete(&input)?;
        let query = parse_react_query(&reply.text).unwrap_or_else(|| {
            session.flag(format!("step {step}: no QUERY line; using the task query"));
            task.base_query.clone()
        });
        let hits: Vec<EvidenceChunk> = search_semantic(index, &query, k, embedder)?
            .into_iter()
            .map(|s| s.chunk)
            .collect();
        let before = evidence.len();
        let added: Vec<String> = hits
            .iter()
            .filter(|h| !evidence.iter().any(|e| e.chunk_id == h.chunk_id))
            .map(|h| h.chunk_id.clone())
            .collect();
        evidence = merge_evidence(&evidence, &hits);
        debug_assert_eq!(evidence.len(), before + added.len());
        trace.rounds.push(IterationRecord {
            iteration: step - 1,
            query,
            preceding_verdict: None,
            retrieved_ids: chunk_ids(&hits),
            added_ids: added,
            evidence_size: evidence.len(),
        });
    }
    let (mut transcript, mut flags) = session.into_parts();
    trace.flags = flags.clone();
    let mut outcome = predict_call(gateway.session("react"), task, instance, chunk_texts(&evidence), "\n\n")?;
    transcript.append(&mut outcome.transcript);
    outcome.transcript = transcript;
    flags.append(&mut outcome.flags);
    outcome.flags = flags;
    Ok(result(
        Method::ReactRag,
        record,
        instance,
        task,
        chunk_ids(&evidence),
        vec![trace],
        Vec::new(),
        outcome,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayConfig, ScriptRule, ScriptedResponder};
    use crate::index::{build_index_with, ChunkingParams, EventFilter, HashingEmbedder};
    use crate::model::{parse_timestamp, EventType};
    use crate::tasks::find_task;
    use chrono::Duration;

    fn gateway(r: ScriptedResponder) -> Gateway {
        Gateway::new(
            r,
            GatewayConfig {
                backoff_base_ms: 0,
                ..GatewayConfig::default()
            },
        )
    }

    fn record(n: usize, code: impl Fn(usize) -> String) -> PatientRecord {
        let base = parse_timestamp("2015-01-01").unwrap();
        PatientRecord::new(
            "B1",
            (0..n)
                .map(|i| ClinicalEvent {
                    concept_code: code(i),
                    event_type: EventType::Diagnosis,
                    description: format!("event number {i} topic {}", i % 9),
                    value: None,
                    timestamp: base + Duration::hours(i as i64),
                })
                .collect(),
        )
    }

    fn instance(rec: &PatientRecord) -> PredictionInstance {
        PredictionInstance {
            subject_id: rec.subject_id.clone(),
            prediction_time: rec.last_timestamp().unwrap(),
            true_label: Some(1),
        }
    }

    fn index(rec: &PatientRecord) -> VectorIndex {
        build_index_with(
            rec,
            rec.last_timestamp().unwrap(),
            &HashingEmbedder::new(64),
            ChunkingParams::default(),
            EventFilter::All,
            1,
        )
        .unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("gpt".parse::<Method>().is_err());
    }

    #[test]
    fn direct_saturates_and_truncates() {
        let task = find_task("guo_los", None).unwrap();
        let g = gateway(ScriptedResponder::new("FINAL: 1"));
        let small = record(10, |i| format!("C{i}"));
        let r = direct_generation(&small, &instance(&small), &task, &g, 1000).unwrap();
        assert_eq!(r.fused_evidence_ids.len(), 10);
        assert_eq!(r.predicted_label, 1);

        let big = record(1500, |i| format!("C{i}"));
        let r = direct_generation(&big, &instance(&big), &task, &g, 1000).unwrap();
        assert_eq!(r.fused_evidence_ids.first().unwrap(), "row:500");
        assert_eq!(r.fused_evidence_ids.last().unwrap(), "row:1499");
        assert_eq!(r.fused_evidence_ids.len(), 1000);
        assert!(!r.transcript[0].prompt.contains("event number 499 "));
        assert!(r.transcript[0].prompt.contains("event number 500 "));
    }

    #[test]
    fn frequency_selection() {
        let codes = ["A", "A", "B", "A", "C", "B", "A", "B", "A"];
        let rec = record(codes.len(), |i| codes[i].to_string());
        // the two most recent A events, chronological
        assert_eq!(select_by_frequency(&rec.events, 2), [6, 8]);

        let uniq = record(20, |i| format!("U{i:02}"));
        assert_eq!(select_by_frequency(&uniq.events, 5), [15, 16, 17, 18, 19]);
        assert_eq!(select_by_frequency(&uniq.events, 100).len(), 20);
    }

    #[test]
    fn vanilla_uses_top_k() {
        let task = find_task("guo_los", None).unwrap();
        let g = gateway(ScriptedResponder::new("FINAL: 0"));
        let rec = record(380, |i| format!("C{}", i % 5));
        let idx = index(&rec);
        assert_eq!(idx.len(), 4);
        let emb = HashingEmbedder::new(64);
        let r = vanilla_rag(&rec, &instance(&rec), &task, &idx, &g, &emb, 10).unwrap();
        assert_eq!(r.fused_evidence_ids.len(), 4);
        assert_eq!(r.predicted_label, 0);
    }

    #[test]
    fn uniform_is_seeded_and_without_replacement() {
        let rec = record(3000, |i| format!("C{}", i % 5));
        let idx = index(&rec);
        let a = sample_uniform(&idx, 1000, 7);
        assert_eq!(a, sample_uniform(&idx, 1000, 7));
        let mut ids: Vec<_> = a.iter().map(|c| c.chunk_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), a.len());
        let rows: usize = a.iter().map(|c| c.row_span.len()).sum();
        assert!(rows >= 1000 && rows < 1000 + 100);
        let small = record(150, |i| format!("C{i}"));
        let sidx = index(&small);
        assert_eq!(sample_uniform(&sidx, 1000, 1).len(), sidx.len());
    }

    #[test]
    fn react_three_steps() {
        let task = find_task("guo_los", None).unwrap();
        let rec = record(2000, |i| format!("C{}", i % 5));
        let idx = index(&rec);
        let emb = HashingEmbedder::new(64);
        let g = gateway(
            ScriptedResponder::new("FINAL: 1")
                .rule(ScriptRule::template(TemplateId::ReactStep, "THOUGHT: x\nQUERY: topic 3")),
        );
        let r = react_rag(&rec, &instance(&rec), &task, &idx, &g, &emb, 5, 3).unwrap();
        assert_eq!(r.traces[0].retrieval_calls(), 3);
        assert_eq!(r.fused_evidence_ids.len(), 5);
        assert_eq!(r.transcript.len(), 4);

        let g = gateway(
            ScriptedResponder::new("FINAL: 1")
                .rule(ScriptRule::template(TemplateId::ReactStep, "QUERY: topic 1").contains("Step 1 of"))
                .rule(ScriptRule::template(TemplateId::ReactStep, "QUERY: event number 1500").contains("Step 2 of"))
                .rule(ScriptRule::template(TemplateId::ReactStep, "no query here")),
        );
        let r = react_rag(&rec, &instance(&rec), &task, &idx, &g, &emb, 5, 3).unwrap();
        assert_eq!(r.traces[0].queries()[2], task.base_query);
        assert!(r.fused_evidence_ids.len() <= 15);
        assert!(r.flags.iter().any(|f| f.contains("no QUERY")));
    }
}
