//! Adaptive iterative retrieval: sufficiency check, single-aspect refinement, merge.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ether::{chronological_order, retrieve_textual, TemporalScoringParams};
use crate::gateway::parse::{marker_line, parse_sufficiency, MISSING_MARKER};
use crate::gateway::{PromptInput, Session, TemplateId};
use crate::index::{EmbeddingProvider, EvidenceChunk, VectorIndex};
use crate::model::Timestamp;
use crate::tasks::TaskSpec;

pub const MAX_QUERY_CHARS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AirParams {
    pub max_iterations: usize,
    /// Estimated-token cap on the evidence shown to the sufficiency check.
    pub summary_token_budget: usize,
}

impl Default for AirParams {
    fn default() -> Self {
        Self {
            max_iterations: 3,
            summary_token_budget: 8000,
        }
    }
}

impl AirParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if self.summary_token_budget == 0 {
            return Err(Error::Config("summary_token_budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalState {
    pub iteration: usize,
    pub current_query: String,
    pub evidence: Vec<EvidenceChunk>,
    pub query_history: Vec<String>,
    pub sufficiency_verdicts: Vec<bool>,
    pub flags: Vec<String>,
}

/// One retrieval round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub query: String,
    /// Verdict that led to this round; none for the seed round.
    pub preceding_verdict: Option<bool>,
    pub retrieved_ids: Vec<String>,
    /// Chunks this round added to the evidence set.
    pub added_ids: Vec<String>,
    pub evidence_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AirTrace {
    pub subject_id: String,
    pub path: String,
    pub rounds: Vec<IterationRecord>,
    /// Verdict after the last round, if one was requested.
    pub final_verdict: Option<bool>,
    pub flags: Vec<String>,
}

impl AirTrace {
    pub fn retrieval_calls(&self) -> usize {
        self.rounds.len()
    }

    pub fn queries(&self) -> Vec<&str> {
        self.rounds.iter().map(|r| r.query.as_str()).collect()
    }
}

/// Union by chunk id (first occurrence wins), then chronological with id tie-break.
pub fn merge_evidence(existing: &[EvidenceChunk], incoming: &[EvidenceChunk]) -> Vec<EvidenceChunk> {
    let mut seen = HashSet::new();
    let mut out: Vec<EvidenceChunk> = existing
        .iter()
        .chain(incoming)
        .filter(|c| seen.insert(c.chunk_id.clone()))
        .cloned()
        .collect();
    out.sort_by(chronological_order);
    out
}

/// Newest chunk texts that fit in `token_budget`, returned oldest first.
fn summary_items(evidence: &[EvidenceChunk], token_budget: usize, chars_per_token: usize) -> (Vec<String>, bool) {
    let mut budget = token_budget.saturating_mul(chars_per_token);
    let mut kept = Vec::new();
    for c in evidence.iter().rev() {
        let n = c.text.chars().count();
        if n <= budget {
            budget -= n;
            kept.push(c.text.clone());
        } else {
            if budget > 0 {
                let tail: String = {
                    let skip = n - budget;
                    c.text.chars().skip(skip).collect()
                };
                kept.push(tail);
            }
            kept.reverse();
            return (kept, true);
        }
    }
    kept.reverse();
    (kept, false)
}

pub fn assess_sufficiency(
    session: &mut Session<'_>,
    task: &TaskSpec,
    query: &str,
    evidence: &[EvidenceChunk],
    summary_token_budget: usize,
) -> Result<bool> {
    let cpt = session.gateway().config().chars_per_token;
    let (items, truncated) = summary_items(evidence, summary_token_budget, cpt);
    if truncated {
        session.flag("sufficiency evidence summary truncated to token budget");
    }
    let input = PromptInput::new(TemplateId::Sufficiency)
        .var("task_name", task.name.clone())
        .var("task_description", task.description.clone())
        .var("query", query)
        .evidence(items, "\n\n");
    match session.complete_parsed(&input, parse_sufficiency)? {
        Some(v) => Ok(v),
        None => {
            session.flag("sufficiency reply unparseable; treating as insufficient");
            Ok(false)
        }
    }
}

fn parse_refinement(reply: &str) -> Option<String> {
    let line = match marker_line(reply, MISSING_MARKER) {
        Some(l) => l.to_string(),
        None => reply.lines().map(str::trim).find(|l| !l.is_empty())?.to_string(),
    };
    let line = line.trim().trim_matches('"').trim().to_string();
    (!line.is_empty()).then_some(line)
}

fn truncate_chars(s: &str, n: usize) -> String {
    s.chars().take(n).collect::<String>().trim_end().to_string()
}

fn same_query(a: &str, b: &str) -> bool {
    a.trim().eq_ignore_ascii_case(b.trim())
}

/// Next query: nonempty, at most 200 characters, distinct from every query in `history`.
pub fn refine_query(
    session: &mut Session<'_>,
    task: &TaskSpec,
    current_query: &str,
    history: &[String],
    evidence: &[EvidenceChunk],
    iteration: usize,
) -> Result<String> {
    let input = PromptInput::new(TemplateId::QueryRefine)
        .var("task_name", task.name.clone())
        .var("task_description", task.description.clone())
        .var("query", current_query)
        .var(
            "query_history",
            history.iter().map(|q| format!("- {q}")).collect::<Vec<_>>().join("\n"),
        )
        .evidence(evidence.iter().map(|c| c.text.clone()).collect(), "\n\n");
    let mut query = match session.complete_parsed(&input, parse_refinement)? {
        Some(q) => q,
        None => {
            session.flag("query refinement reply empty; reusing current query");
            current_query.to_string()
        }
    };
    if query.chars().count() > MAX_QUERY_CHARS {
        session.flag(format!("refined query truncated to {MAX_QUERY_CHARS} characters"));
        query = truncate_chars(&query, MAX_QUERY_CHARS);
    }
    if history.iter().any(|h| same_query(h, &query)) {
        let suffix = format!(" (refinement {iteration})");
        let base = truncate_chars(&query, MAX_QUERY_CHARS - suffix.len());
        session.flag(format!("refined query repeats an earlier query: {query:?}"));
        query = format!("{base}{suffix}");
    }
    Ok(query)
}

fn with_iteration(err: Error, iteration: usize) -> Error {
    match err {
        Error::Transport { message, retriable } => Error::Transport {
            message: format!("iteration {iteration}: {message}"),
            retriable,
        },
        other => other,
    }
}

pub struct AirRun {
    pub evidence: Vec<EvidenceChunk>,
    pub state: RetrievalState,
    pub trace: AirTrace,
}

/// Seed retrieval, then up to `max_iterations - 1` rounds of assess, refine, retrieve, merge.
#[allow(clippy::too_many_arguments)]
pub fn iterative_retrieve(
    session: &mut Session<'_>,
    task: &TaskSpec,
    seed_query: &str,
    index: &VectorIndex,
    tau_star: Timestamp,
    ether: &TemporalScoringParams,
    air: &AirParams,
    provider: &dyn EmbeddingProvider,
) -> Result<AirRun> {
    air.validate()?;
    let flags_before = session.flags.len();
    let mut state = RetrievalState {
        iteration: 0,
        current_query: seed_query.to_string(),
        evidence: Vec::new(),
        query_history: vec![seed_query.to_string()],
        sufficiency_verdicts: Vec::new(),
        flags: Vec::new(),
    };
    let mut trace = AirTrace {
        subject_id: index.subject_id.clone(),
        path: session.tag().to_string(),
        rounds: Vec::new(),
        final_verdict: None,
        flags: Vec::new(),
    };

    let round = |state: &mut RetrievalState, trace: &mut AirTrace, verdict: Option<bool>| -> Result<()> {
        let got = retrieve_textual(&state.current_query, index, tau_star, ether, provider)
            .map_err(|e| with_iteration(e, state.iteration))?;
        let before: HashSet<String> = state.evidence.iter().map(|c| c.chunk_id.clone()).collect();
        let incoming = got.evidence();
        state.evidence = merge_evidence(&state.evidence, &incoming);
        state.flags.extend(got.diagnostics);
        trace.rounds.push(IterationRecord {
            iteration: state.iteration,
            query: state.current_query.clone(),
            preceding_verdict: verdict,
            retrieved_ids: incoming.iter().map(|c| c.chunk_id.clone()).collect(),
            added_ids: incoming
                .iter()
                .filter(|c| !before.contains(&c.chunk_id))
                .map(|c| c.chunk_id.clone())
                .collect(),
            evidence_size: state.evidence.len(),
        });
        Ok(())
    };

    round(&mut state, &mut trace, None)?;
    for t in 1..air.max_iterations {
        let verdict = assess_sufficiency(
            session,
            task,
            &state.current_query,
            &state.evidence,
            air.summary_token_budget,
        )
        .map_err(|e| with_iteration(e, t))?;
        state.sufficiency_verdicts.push(verdict);
        if verdict {
            trace.final_verdict = Some(true);
            break;
        }
        let next = refine_query(
            session,
            task,
            &state.current_query,
            &state.query_history,
            &state.evidence,
            t,
        )
        .map_err(|e| with_iteration(e, t))?;
        state.iteration = t;
        state.current_query = next.clone();
        state.query_history.push(next);
        round(&mut state, &mut trace, Some(false))?;
    }

    state.flags.extend(session.flags[flags_before..].iter().cloned());
    trace.flags = state.flags.clone();
    Ok(AirRun {
        evidence: state.evidence.clone(),
        state,
        trace,
    })
}

/// One JSON line per retrieval round, tagged with subject and path.
pub fn write_traces(path: &Path, traces: &[AirTrace]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        subject_id: &'a str,
        path: &'a str,
        #[serde(flatten)]
        round: &'a IterationRecord,
    }
    let mut out = Vec::new();
    for t in traces {
        for r in &t.rounds {
            serde_json::to_writer(
                &mut out,
                &Line {
                    subject_id: &t.subject_id,
                    path: &t.path,
                    round: r,
                },
            )
            .map_err(|e| Error::Data(e.to_string()))?;
            out.push(b'\n');
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
