//! Constrained-output parsing. Every template ends with a `MARKER: value` line.

use crate::error::{Error, Result};

pub const FINAL_MARKER: &str = "FINAL:";
pub const HYPOTHESIS_MARKER: &str = "HYPOTHESIS:";
pub const SUFFICIENT_MARKER: &str = "SUFFICIENT:";
pub const MISSING_MARKER: &str = "MISSING:";
pub const SELECTED_MARKER: &str = "SELECTED:";
pub const QUERY_MARKER: &str = "QUERY:";

/// Text following the first case-insensitive occurrence of `marker`, to the end of the reply.
pub fn after_marker<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    let lower = text.to_ascii_lowercase();
    let pos = lower.find(&marker.to_ascii_lowercase())?;
    Some(&text[pos + marker.len()..])
}

/// Rest of the line following `marker`, trimmed of whitespace and markdown emphasis.
pub fn marker_line<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    let rest = after_marker(text, marker)?;
    let line = rest.lines().next().unwrap_or("");
    Some(line.trim().trim_matches('*').trim())
}

/// First integer token after the answer marker; must lie in `label_space`.
pub fn parse_label(text: &str, marker: &str, label_space: &[i64]) -> Result<i64> {
    if label_space.is_empty() {
        return Err(Error::Parameter("label space is empty".into()));
    }
    let rest = after_marker(text, marker)
        .ok_or_else(|| Error::Parse(format!("no {marker} marker in reply")))?;
    let rest = rest.trim_start_matches(|c: char| c.is_whitespace() || c == '*');
    let end = rest
        .char_indices()
        .find(|&(i, c)| !(c.is_ascii_digit() || (i == 0 && (c == '-' || c == '+'))))
        .map(|(i, _)| i)
        .unwrap_or(rest.len());
    let token = &rest[..end];
    let label: i64 = token
        .parse()
        .map_err(|_| Error::Parse(format!("no integer after {marker}")))?;
    if !label_space.contains(&label) {
        return Err(Error::Parse(format!(
            "label {label} not in label space {label_space:?}"
        )));
    }
    Ok(label)
}

/// `SUFFICIENT: yes|no`, or a bare yes/no/sufficient/insufficient reply.
pub fn parse_sufficiency(text: &str) -> Option<bool> {
    let token = match marker_line(text, SUFFICIENT_MARKER) {
        Some(line) => line.split_whitespace().next().unwrap_or("").to_string(),
        None => text.trim().to_string(),
    };
    let token = token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_ascii_lowercase();
    match token.as_str() {
        "yes" | "true" | "sufficient" => Some(true),
        "no" | "false" | "insufficient" => Some(false),
        _ => None,
    }
}
