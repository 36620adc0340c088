//! Hybrid retrieval: numeric indicator trajectories with coarse-to-fine selection,
//! and semantic + U-shaped temporal ranking for textual chunks.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::parse::{marker_line, SELECTED_MARKER};
use crate::gateway::{PromptInput, Session, TemplateId};
use crate::index::{cosine_similarity, score_all, EmbeddingProvider, EvidenceChunk, VectorIndex};
use crate::ingest::format_numeric;
use crate::model::{days_between, format_timestamp, ClinicalEvent, Timestamp};
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorPoint {
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorTrajectory {
    /// Case-folded, whitespace-normalized description; the grouping key.
    pub indicator_name: String,
    pub points: Vec<IndicatorPoint>,
}

impl IndicatorTrajectory {
    pub fn render(&self) -> String {
        let pts: Vec<String> = self
            .points
            .iter()
            .map(|p| {
                let mut v = format_numeric(p.value);
                if let Some(u) = p.unit.as_deref().filter(|u| !u.trim().is_empty()) {
                    v.push(' ');
                    v.push_str(u.trim());
                }
                format!("{v} at {}", format_timestamp(&p.timestamp))
            })
            .collect();
        format!("{}: {}", self.indicator_name, pts.join("; "))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NumericEvidence {
    pub trajectories: Vec<IndicatorTrajectory>,
}

pub const NO_NUMERIC: &str = "(no numeric indicators selected)";

impl NumericEvidence {
    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn render(&self) -> String {
        if self.trajectories.is_empty() {
            return NO_NUMERIC.to_string();
        }
        self.trajectories
            .iter()
            .map(IndicatorTrajectory::render)
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn indicator_names(&self) -> Vec<String> {
        self.trajectories.iter().map(|t| t.indicator_name.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalScoringParams {
    pub alpha: f64,
    pub tau_recent_days: f64,
    pub tau_early_days: f64,
    pub k_cand: usize,
    pub k_final: usize,
}

impl Default for TemporalScoringParams {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            tau_recent_days: 180.0,
            tau_early_days: 3650.0,
            k_cand: 100,
            k_final: 5,
        }
    }
}

impl TemporalScoringParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha out of [0,1]".into()));
        }
        if !(self.tau_recent_days > 0.0 && self.tau_recent_days.is_finite())
            || !(self.tau_early_days > 0.0 && self.tau_early_days.is_finite())
        {
            return Err(Error::Config("tau_recent and tau_early must be positive".into()));
        }
        if self.k_final == 0 || self.k_cand == 0 {
            return Err(Error::Config("k_cand and k_final must be at least 1".into()));
        }
        if self.k_final > self.k_cand {
            return Err(Error::Config("k_final must not exceed k_cand".into()));
        }
        Ok(())
    }
}

/// Indicator-path budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicatorParams {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub n_recent: usize,
}

impl Default for IndicatorParams {
    fn default() -> Self {
        Self {
            n_coarse: 30,
            n_fine: 10,
            n_recent: 5,
        }
    }
}

impl IndicatorParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_coarse == 0 || self.n_recent == 0 {
            return Err(Error::Config("n_coarse and n_recent must be at least 1".into()));
        }
        if self.n_fine > self.n_coarse {
            return Err(Error::Config("n_fine must not exceed n_coarse".into()));
        }
        Ok(())
    }
}

pub fn normalize_indicator_name(description: &str) -> String {
    description
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Group numeric events at or before `cutoff` by normalized description.
pub fn aggregate_indicators(events: &[ClinicalEvent], cutoff: Timestamp) -> Vec<IndicatorTrajectory> {
    let mut groups: BTreeMap<String, Vec<IndicatorPoint>> = BTreeMap::new();
    for e in events.iter().filter(|e| e.timestamp <= cutoff) {
        if let Some((value, unit)) = e.numeric_value() {
            groups
                .entry(normalize_indicator_name(&e.description))
                .or_default()
                .push(IndicatorPoint {
                    value,
                    unit: unit.map(str::to_string),
                    timestamp: e.timestamp,
                });
        }
    }
    groups
        .into_iter()
        .map(|(indicator_name, mut points)| {
            points.sort_by_key(|p| p.timestamp);
            IndicatorTrajectory {
                indicator_name,
                points,
            }
        })
        .collect()
}

/// Indicator names ranked by cosine similarity to the query, ties by name.
pub fn coarse_select_indicators(
    query: &str,
    trajectories: &[IndicatorTrajectory],
    n_coarse: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<String>> {
    if n_coarse == 0 {
        return Err(Error::Parameter("n_coarse must be at least 1".into()));
    }
    if trajectories.is_empty() {
        return Ok(Vec::new());
    }
    let q = provider.embed(query)?;
    let mut scored = trajectories
        .iter()
        .map(|t| {
            let v = provider.embed(&t.indicator_name)?;
            Ok((cosine_similarity(&q, &v)?, t.indicator_name.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    scored.truncate(n_coarse);
    Ok(scored.into_iter().map(|(_, n)| n).collect())
}

/// Names from a `SELECTED:` line, in stated order, without validation.
pub fn parse_selection(reply: &str) -> Option<Vec<String>> {
    let line = marker_line(reply, SELECTED_MARKER)?;
    Some(
        line.split(';')
            .map(|s| {
                s.trim()
                    .trim_start_matches("- ")
                    .trim()
                    .trim_matches(|c| c == '"' || c == '\'' || c == '`')
            })
            .filter(|s| !s.is_empty())
            .map(normalize_indicator_name)
            .collect(),
    )
}

/// Fine selection by the model. Unknown names are dropped and the list is
/// backfilled in coarse order; an unparseable reply falls back to the coarse prefix.
pub fn rerank_indicators(
    session: &mut Session<'_>,
    task: &TaskSpec,
    query: &str,
    candidates: &[String],
    n_fine: usize,
) -> Result<Vec<String>> {
    let n_fine = n_fine.min(candidates.len());
    if n_fine == 0 {
        return Ok(Vec::new());
    }
    let input = PromptInput::new(TemplateId::IndicatorSelect)
        .var("task_name", task.name.clone())
        .var("task_description", task.description.clone())
        .var("query", query)
        .var("candidates", candidates.join("\n"))
        .var("n_fine", n_fine.to_string());
    let Some(named) = session.complete_parsed(&input, parse_selection)? else {
        session.flag("indicator selection unparseable; using coarse order");
        return Ok(candidates[..n_fine].to_vec());
    };

    let mut selected: Vec<String> = Vec::with_capacity(n_fine);
    let mut dropped = Vec::new();
    for name in named {
        if selected.len() == n_fine {
            break;
        }
        if candidates.contains(&name) {
            if !selected.contains(&name) {
                selected.push(name);
            }
        } else {
            dropped.push(name);
        }
    }
    if !dropped.is_empty() {
        session.flag(format!(
            "indicator selection named unknown indicators: {}",
            dropped.join("; ")
        ));
    }
    if selected.len() < n_fine {
        let before = selected.len();
        for c in candidates {
            if selected.len() == n_fine {
                break;
            }
            if !selected.contains(c) {
                selected.push(c.clone());
            }
        }
        session.flag(format!(
            "indicator selection backfilled {} of {n_fine} from coarse order",
            n_fine - before
        ));
    }
    Ok(selected)
}

/// Last `n_recent` points (at or before `cutoff`) of each selected indicator, in selection order.
pub fn collect_numeric_evidence(
    selected: &[String],
    trajectories: &[IndicatorTrajectory],
    n_recent: usize,
    cutoff: Timestamp,
) -> (NumericEvidence, Vec<String>) {
    let mut diagnostics = Vec::new();
    let mut out = Vec::new();
    for name in selected {
        let Some(t) = trajectories.iter().find(|t| &t.indicator_name == name) else {
            diagnostics.push(format!("selected indicator {name:?} has no trajectory"));
            continue;
        };
        let visible: Vec<&IndicatorPoint> =
            t.points.iter().filter(|p| p.timestamp <= cutoff).collect();
        let start = visible.len().saturating_sub(n_recent);
        out.push(IndicatorTrajectory {
            indicator_name: t.indicator_name.clone(),
            points: visible[start..].iter().map(|p| (*p).clone()).collect(),
        });
    }
    (NumericEvidence { trajectories: out }, diagnostics)
}

/// Full indicator path: aggregate, coarse rank, model rerank, tail selection.
pub fn numeric_pipeline(
    session: &mut Session<'_>,
    task: &TaskSpec,
    history: &[ClinicalEvent],
    cutoff: Timestamp,
    params: IndicatorParams,
    provider: &dyn EmbeddingProvider,
) -> Result<NumericEvidence> {
    let trajectories = aggregate_indicators(history, cutoff);
    let coarse = coarse_select_indicators(&task.base_query, &trajectories, params.n_coarse, provider)?;
    let fine = rerank_indicators(session, task, &task.base_query, &coarse, params.n_fine)?;
    let (evidence, diagnostics) = collect_numeric_evidence(&fine, &trajectories, params.n_recent, cutoff);
    for d in diagnostics {
        session.flag(d);
    }
    Ok(evidence)
}

/// U-shaped score from the two day offsets, both nonnegative.
pub fn u_shape_from_days(days_to_prediction: f64, days_from_start: f64, params: &TemporalScoringParams) -> f64 {
    let recent = (-days_to_prediction / params.tau_recent_days).exp();
    let early = (-days_from_start / params.tau_early_days).exp();
    recent.max(early)
}

/// Clamp `tau_c` into `[tau_first, tau_star]`; the flag reports whether it moved.
pub fn clamp_tau(tau_c: Timestamp, tau_star: Timestamp, tau_first: Timestamp) -> (Timestamp, bool) {
    let tau_first = tau_first.min(tau_star);
    let clamped = tau_c.clamp(tau_first, tau_star);
    (clamped, clamped != tau_c)
}

/// `max(exp(-(τ*-τc)/τ_recent), exp(-(τc-τ_first)/τ_early))` with durations in days.
pub fn u_shape_time_score(
    tau_c: Timestamp,
    tau_star: Timestamp,
    tau_first: Timestamp,
    params: &TemporalScoringParams,
) -> f64 {
    let tau_first = tau_first.min(tau_star);
    let (tau_c, _) = clamp_tau(tau_c, tau_star, tau_first);
    u_shape_from_days(
        days_between(&tau_c, &tau_star),
        days_between(&tau_first, &tau_c),
        params,
    )
}

pub fn hybrid_score(s_sem: f64, s_time: f64, alpha: f64) -> f64 {
    alpha * s_sem + (1.0 - alpha) * s_time
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedChunk {
    pub chunk: EvidenceChunk,
    pub semantic: f64,
    pub temporal: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextualRetrieval {
    /// Chronological.
    pub chunks: Vec<RankedChunk>,
    pub diagnostics: Vec<String>,
}

impl TextualRetrieval {
    pub fn evidence(&self) -> Vec<EvidenceChunk> {
        self.chunks.iter().map(|r| r.chunk.clone()).collect()
    }
}

/// Final-selection order: hybrid score descending, then earlier chunk time, then id.
pub fn hybrid_order(a: &RankedChunk, b: &RankedChunk) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.chunk.tau().cmp(&b.chunk.tau()))
        .then_with(|| a.chunk.chunk_id.cmp(&b.chunk.chunk_id))
}

pub fn chronological_order(a: &EvidenceChunk, b: &EvidenceChunk) -> Ordering {
    a.tau().cmp(&b.tau()).then_with(|| a.chunk_id.cmp(&b.chunk_id))
}

/// Semantic shortlist of `k_cand`, hybrid rerank to `k_final`, returned chronologically.
pub fn retrieve_textual(
    query: &str,
    index: &VectorIndex,
    tau_star: Timestamp,
    params: &TemporalScoringParams,
    provider: &dyn EmbeddingProvider,
) -> Result<TextualRetrieval> {
    params.validate()?;
    if index.cutoff > tau_star {
        return Err(Error::Parameter(format!(
            "index cutoff {} is after prediction time {}",
            format_timestamp(&index.cutoff),
            format_timestamp(&tau_star)
        )));
    }
    if index.is_empty() {
        return Ok(TextualRetrieval::default());
    }
    let tau_first = index
        .history_start
        .or_else(|| index.chunks.iter().map(|c| c.time_span.0).min())
        .expect("nonempty index");

    let q = provider.embed(query)?;
    let mut candidates = score_all(index, &q)?;
    candidates.truncate(params.k_cand);

    let mut diagnostics = Vec::new();
    let mut ranked: Vec<RankedChunk> = candidates
        .into_iter()
        .map(|c| {
            let (_, moved) = clamp_tau(c.chunk.tau(), tau_star, tau_first);
            if moved {
                diagnostics.push(format!(
                    "chunk {} time outside [history start, prediction time]; clamped",
                    c.chunk.chunk_id
                ));
            }
            let temporal = u_shape_time_score(c.chunk.tau(), tau_star, tau_first, params);
            RankedChunk {
                score: hybrid_score(c.semantic, temporal, params.alpha),
                semantic: c.semantic,
                temporal,
                chunk: c.chunk,
            }
        })
        .collect();
    ranked.sort_by(hybrid_order);
    ranked.truncate(params.k_final);
    ranked.sort_by(|a, b| chronological_order(&a.chunk, &b.chunk));
    Ok(TextualRetrieval {
        chunks: ranked,
        diagnostics,
    })
}
