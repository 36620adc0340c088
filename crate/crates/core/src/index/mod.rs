//! Per-subject chunk index with exhaustive cosine search.

mod chunk;
mod embed;
mod persist;

use std::cmp::Ordering;
use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use chunk::{chunk_events, chunk_spans, RowSpan, TextChunk};
pub use embed::{
    cosine_similarity, is_zero_vector, tokenize, CachedEmbedder, EmbeddingProvider,
    HashingEmbedder, HttpEmbedder, HttpEmbedderConfig,
};
pub use persist::{load_index, save_index, IndexManifest};

use crate::error::{Error, Result};
use crate::ingest::serialize_event;
use crate::model::{history_before, ClinicalEvent, PatientRecord, Timestamp};

/// A serialized, embedded window of event lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceChunk {
    pub chunk_id: String,
    pub subject_id: String,
    pub row_span: RowSpan,
    /// (earliest, latest) event time in the chunk.
    pub time_span: (Timestamp, Timestamp),
    pub text: String,
    #[serde(skip)]
    pub embedding: Vec<f32>,
}

impl EvidenceChunk {
    /// The chunk's timestamp for temporal scoring: its latest event.
    pub fn tau(&self) -> Timestamp {
        self.time_span.1
    }
}

/// Content hash over subject, span and text.
pub fn chunk_id(subject_id: &str, span: RowSpan, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(subject_id.as_bytes());
    h.update([0u8]);
    h.update(span.start.to_le_bytes());
    h.update(span.end.to_le_bytes());
    h.update(text.as_bytes());
    let digest = h.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventFilter {
    /// Events without a numeric value (numeric events take the indicator path).
    TextualOnly,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkingParams {
    pub chunk_size: usize,
    pub overlap: usize,
}

impl Default for ChunkingParams {
    fn default() -> Self {
        Self {
            chunk_size: 100,
            overlap: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    pub subject_id: String,
    pub chunks: Vec<EvidenceChunk>,
    pub provider_fingerprint: String,
    pub dimension: usize,
    pub chunking: ChunkingParams,
    pub filter: EventFilter,
    pub cutoff: Timestamp,
    /// Earliest visible event of any kind; anchors the early branch of temporal scoring.
    pub history_start: Option<Timestamp>,
    pub diagnostics: Vec<String>,
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Embed texts with at most `max_in_flight` concurrent calls; output order matches input.
pub fn embed_all(
    provider: &dyn EmbeddingProvider,
    texts: &[&str],
    max_in_flight: usize,
) -> Vec<Result<Vec<f32>>> {
    let workers = max_in_flight.clamp(1, texts.len().max(1));
    if workers == 1 {
        return texts.iter().map(|t| provider.embed(t)).collect();
    }
    let next = AtomicUsize::new(0);
    let mut results: Vec<Option<Result<Vec<f32>>>> = (0..texts.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, AtomicOrdering::Relaxed);
                        if i >= texts.len() {
                            break;
                        }
                        out.push((i, provider.embed(texts[i])));
                    }
                    out
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("embedding worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    results.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Chunk and embed the subject's visible textual events.
pub fn build_index(
    record: &PatientRecord,
    cutoff: Timestamp,
    provider: &dyn EmbeddingProvider,
    chunking: ChunkingParams,
) -> Result<VectorIndex> {
    build_index_with(record, cutoff, provider, chunking, EventFilter::TextualOnly, 1)
}

pub fn build_index_with(
    record: &PatientRecord,
    cutoff: Timestamp,
    provider: &dyn EmbeddingProvider,
    chunking: ChunkingParams,
    filter: EventFilter,
    max_in_flight: usize,
) -> Result<VectorIndex> {
    let history = history_before(record, cutoff);
    let selected: Vec<&ClinicalEvent> = history
        .iter()
        .filter(|e| filter == EventFilter::All || !e.is_numeric())
        .collect();
    let cached;
    let provider: &dyn EmbeddingProvider = if provider.is_deterministic() {
        provider
    } else {
        cached = CachedEmbedder::new(provider);
        &cached
    };

    let mut index = VectorIndex {
        subject_id: record.subject_id.clone(),
        chunks: Vec::new(),
        provider_fingerprint: provider.fingerprint(),
        dimension: provider.dimension(),
        chunking,
        filter,
        cutoff,
        history_start: history.first().map(|e| e.timestamp),
        diagnostics: Vec::new(),
    };
    if selected.is_empty() {
        return Ok(index);
    }

    let lines: Vec<String> = selected.iter().map(|e| serialize_event(e)).collect();
    let pieces = chunk_events(&lines, chunking.chunk_size, chunking.overlap)?;
    let texts: Vec<&str> = pieces.iter().map(|p| p.text.as_str()).collect();
    let embeddings = embed_all(provider, &texts, max_in_flight);

    let mut seen = HashSet::new();
    for (piece, embedding) in pieces.into_iter().zip(embeddings) {
        let id = chunk_id(&record.subject_id, piece.span, &piece.text);
        let embedding = embedding.map_err(|e| Error::Embedding {
            chunk_id: id.clone(),
            message: e.to_string(),
        })?;
        if embedding.len() != index.dimension {
            return Err(Error::Embedding {
                chunk_id: id,
                message: format!(
                    "provider returned dimension {}, declared {}",
                    embedding.len(),
                    index.dimension
                ),
            });
        }
        if is_zero_vector(&embedding) {
            index.diagnostics.push(format!("zero embedding for chunk {id}"));
        }
        debug_assert!(seen.insert(id.clone()), "chunk ids unique");
        let time_span = (
            selected[piece.span.start].timestamp,
            selected[piece.span.end].timestamp,
        );
        index.chunks.push(EvidenceChunk {
            chunk_id: id,
            subject_id: record.subject_id.clone(),
            row_span: piece.span,
            time_span,
            text: piece.text,
            embedding,
        });
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredChunk {
    pub chunk: EvidenceChunk,
    pub semantic: f64,
}

/// Ordering for semantic results: score descending, then earlier chunk time, then id.
pub fn semantic_order(a: (f64, &EvidenceChunk), b: (f64, &EvidenceChunk)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.tau().cmp(&b.1.tau()))
        .then_with(|| a.1.chunk_id.cmp(&b.1.chunk_id))
}

/// Cosine similarity of the query against every chunk, sorted.
pub fn score_all(index: &VectorIndex, query_embedding: &[f32]) -> Result<Vec<ScoredChunk>> {
    let mut scored = index
        .chunks
        .iter()
        .map(|c| {
            Ok(ScoredChunk {
                semantic: cosine_similarity(query_embedding, &c.embedding)?,
                chunk: c.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| semantic_order((a.semantic, &a.chunk), (b.semantic, &b.chunk)));
    Ok(scored)
}

/// Top-`k` chunks by cosine similarity to `query_text`.
pub fn search_semantic(
    index: &VectorIndex,
    query_text: &str,
    k: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<ScoredChunk>> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if index.is_empty() {
        return Ok(Vec::new());
    }
    let q = provider.embed(query_text)?;
    let mut scored = score_all(index, &q)?;
    scored.truncate(k);
    Ok(scored)
}
