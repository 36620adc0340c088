use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive 0-based row range into the serialized event list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowSpan {
    pub start: usize,
    pub end: usize,
}

impl RowSpan {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Overlapping windows of `chunk_size` rows with stride `chunk_size - overlap`.
/// The final window always ends at row `n - 1`.
pub fn chunk_spans(n: usize, chunk_size: usize, overlap: usize) -> Result<Vec<RowSpan>> {
    if chunk_size == 0 {
        return Err(Error::Parameter("chunk_size must be positive".into()));
    }
    if overlap >= chunk_size {
        return Err(Error::Parameter(format!(
            "overlap ({overlap}) must be smaller than chunk_size ({chunk_size})"
        )));
    }
    if n == 0 {
        return Err(Error::Parameter("cannot chunk an empty event list".into()));
    }
    let stride = chunk_size - overlap;
    let mut spans = Vec::with_capacity(n.div_ceil(stride));
    let mut start = 0;
    loop {
        let end = (start + chunk_size - 1).min(n - 1);
        spans.push(RowSpan { start, end });
        if end == n - 1 {
            break;
        }
        start += stride;
    }
    Ok(spans)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextChunk {
    pub span: RowSpan,
    pub text: String,
}

/// Split serialized event lines into overlapping chunks joined by newlines.
pub fn chunk_events<S: AsRef<str>>(
    lines: &[S],
    chunk_size: usize,
    overlap: usize,
) -> Result<Vec<TextChunk>> {
    Ok(chunk_spans(lines.len(), chunk_size, overlap)?
        .into_iter()
        .map(|span| TextChunk {
            span,
            text: lines[span.start..=span.end]
                .iter()
                .map(AsRef::as_ref)
                .collect::<Vec<_>>()
                .join("\n"),
        })
        .collect())
}
