//! Index files: `manifest.json`, `chunks.jsonl`, and `embeddings.f32`
//! (row-major little-endian f32, one row per chunk in `chunks.jsonl` order).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChunkingParams, EventFilter, EvidenceChunk, VectorIndex};
use crate::error::{Error, Result};
use crate::model::Timestamp;

const MANIFEST: &str = "manifest.json";
const CHUNKS: &str = "chunks.jsonl";
const EMBEDDINGS: &str = "embeddings.f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub subject_id: String,
    pub provider_fingerprint: String,
    pub dimension: usize,
    pub chunk_size: usize,
    pub overlap: usize,
    pub filter: EventFilter,
    pub cutoff: Timestamp,
    pub history_start: Option<Timestamp>,
    pub chunk_count: usize,
}

pub fn save_index(dir: &Path, index: &VectorIndex) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = IndexManifest {
        subject_id: index.subject_id.clone(),
        provider_fingerprint: index.provider_fingerprint.clone(),
        dimension: index.dimension,
        chunk_size: index.chunking.chunk_size,
        overlap: index.chunking.overlap,
        filter: index.filter,
        cutoff: index.cutoff,
        history_start: index.history_start,
        chunk_count: index.chunks.len(),
    };
    let path = dir.join(MANIFEST);
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;

    let mut lines = Vec::new();
    let mut floats = Vec::with_capacity(index.chunks.len() * index.dimension * 4);
    for c in &index.chunks {
        serde_json::to_writer(&mut lines, c).map_err(|e| Error::Data(e.to_string()))?;
        lines.push(b'\n');
        for x in &c.embedding {
            floats.write_all(&x.to_le_bytes()).expect("vec write");
        }
    }
    let path = dir.join(CHUNKS);
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(EMBEDDINGS);
    fs::write(&path, floats).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_index(dir: &Path) -> Result<VectorIndex> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: IndexManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;

    let path = dir.join(CHUNKS);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut chunks = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<EvidenceChunk>(l))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;

    let path = dir.join(EMBEDDINGS);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = chunks.len() * manifest.dimension * 4;
    if chunks.len() != manifest.chunk_count || raw.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {} chunks / {expected} embedding bytes, found {} / {}",
            dir.display(),
            manifest.chunk_count,
            chunks.len(),
            raw.len()
        )));
    }
    if manifest.dimension > 0 {
        for (chunk, row) in chunks.iter_mut().zip(raw.chunks_exact(manifest.dimension * 4)) {
            chunk.embedding = row
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
        }
    }
    Ok(VectorIndex {
        subject_id: manifest.subject_id,
        chunks,
        provider_fingerprint: manifest.provider_fingerprint,
        dimension: manifest.dimension,
        chunking: ChunkingParams {
            chunk_size: manifest.chunk_size,
            overlap: manifest.overlap,
        },
        filter: manifest.filter,
        cutoff: manifest.cutoff,
        history_start: manifest.history_start,
        diagnostics: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{build_index, HashingEmbedder};
    use crate::model::{parse_timestamp, ClinicalEvent, EventType, PatientRecord};

    #[test]
    fn save_load_round_trip() {
        let base = parse_timestamp("2019-03-01 00:00:00").unwrap();
        let record = PatientRecord::new(
            "subj",
            (0..230)
                .map(|i| ClinicalEvent {
                    concept_code: format!("P{i}"),
                    event_type: EventType::Procedure,
                    description: format!("procedure {}", i % 9),
                    value: None,
                    timestamp: base + chrono::Duration::minutes(i * 90),
                })
                .collect(),
        );
        let idx = build_index(
            &record,
            parse_timestamp("2030-01-01").unwrap(),
            &HashingEmbedder::new(48),
            ChunkingParams::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_index(dir.path(), &idx).unwrap();
        let bytes = fs::read(dir.path().join(EMBEDDINGS)).unwrap();
        assert_eq!(bytes.len(), idx.len() * 48 * 4);
        assert_eq!(
            f32::from_le_bytes(bytes[..4].try_into().unwrap()),
            idx.chunks[0].embedding[0]
        );
        assert_eq!(load_index(dir.path()).unwrap(), idx);
    }
}
